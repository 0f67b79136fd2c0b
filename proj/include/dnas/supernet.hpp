#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dnas/blocks.hpp"
#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/ops.hpp"
#include "dnas/random.hpp"
#include "dnas/search_space.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// softmax(theta), stabilized by max subtraction.
inline std::vector<double> layer_probs(std::span<const float> theta) {
  std::vector<double> p(theta.size());
  if (theta.empty()) return p;
  const double mx = *std::max_element(theta.begin(), theta.end());
  double z = 0.0;
  for (size_t i = 0; i < theta.size(); ++i) z += (p[i] = std::exp(static_cast<double>(theta[i]) - mx));
  for (auto& v : p) v /= z;
  return p;
}

inline std::vector<double> sample_gumbel_noise(size_t n, Rng& rng) {
  std::vector<double> g(n);
  for (auto& v : g) v = gumbel_sample(rng);
  return g;
}

/// m_i = softmax((theta_i + g_i) / tau) with the noise g held fixed.
/// Differentiable with respect to theta.
inline Tensor gumbel_softmax(const Tensor& theta_row, const std::vector<double>& noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: temperature must be > 0, got " + std::to_string(tau));
  const auto th = theta_row.data();
  if (noise.size() != th.size()) throw ConfigError("gumbel_softmax: noise length mismatch");
  const size_t n = th.size();
  std::vector<double> logits(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    logits[i] = (static_cast<double>(th[i]) + noise[i]) / tau;
    mx = std::max(mx, logits[i]);
  }
  double z = 0.0;
  std::vector<double> m(n);
  for (size_t i = 0; i < n; ++i) z += (m[i] = std::exp(logits[i] - mx));
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) {
    m[i] /= z;
    out[i] = static_cast<float>(m[i]);
  }
  return make_result(theta_row.shape(), std::move(out), {theta_row}, "gumbel_softmax",
                     [m = std::move(m), tau](Node& self) {
                       Node& t = *self.inputs[0];
                       if (!t.requires_grad) return;
                       // d m_j / d theta_i = m_j (delta_ij - m_i) / tau
                       double dot = 0.0;
                       for (size_t j = 0; j < m.size(); ++j) dot += self.grad[j] * m[j];
                       for (size_t i = 0; i < m.size(); ++i) {
                         t.grad[i] += static_cast<float>(m[i] * (self.grad[i] - dot) / tau);
                       }
                     });
}

struct GumbelMask {
  Tensor mask;                // [candidates]
  std::vector<double> noise;  // the draw used
  double tau = 1.0;
};

inline GumbelMask sample_gumbel_mask(const Tensor& theta_row, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw ConfigError("sample_gumbel_mask: temperature must be > 0");
  GumbelMask gm;
  gm.noise = sample_gumbel_noise(static_cast<size_t>(theta_row.numel()), rng);
  gm.tau = tau;
  gm.mask = gumbel_softmax(theta_row, gm.noise, tau);
  return gm;
}

/// Architecture logits, one row per searchable layer.
struct ThetaParams {
  std::vector<Tensor> rows;

  static ThetaParams zeros(const SearchSpace& space) {
    ThetaParams t;
    for (const auto& slot : space.slots) t.rows.push_back(Tensor::zeros({slot.candidate_count()}, true));
    return t;
  }

  size_t num_layers() const { return rows.size(); }

  ParamList params() const {
    ParamList out;
    for (size_t l = 0; l < rows.size(); ++l) out.push_back({"theta" + std::to_string(l), rows[l]});
    return out;
  }

  std::vector<std::vector<double>> probs() const {
    std::vector<std::vector<double>> p;
    for (const auto& r : rows) p.push_back(layer_probs(r.data()));
    return p;
  }

  void check_matches(const SearchSpace& space) const {
    if (rows.size() != space.slots.size()) {
      throw ConfigError("theta has " + std::to_string(rows.size()) + " layers, space has " +
                        std::to_string(space.slots.size()));
    }
    for (size_t l = 0; l < rows.size(); ++l) {
      if (rows[l].numel() != space.slots[l].candidate_count()) {
        throw ConfigError("theta layer " + std::to_string(l) + " has " +
                          std::to_string(rows[l].numel()) + " entries, slot has " +
                          std::to_string(space.slots[l].candidate_count()) + " candidates");
      }
    }
  }
};

/// Sum over layers of the entropy of softmax(theta_l), in nats.
inline double arch_entropy(const ThetaParams& theta) {
  double h = 0.0;
  for (const auto& row : theta.rows) {
    for (double p : layer_probs(row.data())) {
      if (p > 0.0) h -= p * std::log(p);
    }
  }
  return h;
}

/// Independent categorical draw per layer from softmax(theta_l).
inline ArchDescriptor sample_arch(const ThetaParams& theta, const SearchSpace& space, Rng& rng) {
  theta.check_matches(space);
  ArchDescriptor a;
  a.space_hash = space.hash;
  for (const auto& row : theta.rows) {
    const auto p = layer_probs(row.data());
    const double u = uniform01(rng);
    double cdf = 0.0;
    int pick = static_cast<int>(p.size()) - 1;
    for (size_t i = 0; i < p.size(); ++i) {
      cdf += p[i];
      if (u < cdf) {
        pick = static_cast<int>(i);
        break;
      }
    }
    a.choices.push_back(pick);
  }
  return a;
}

/// log P_theta(a) = Σ_l log softmax(theta_l)[a_l].
inline double arch_log_prob(const ThetaParams& theta, const ArchDescriptor& arch) {
  if (arch.choices.size() != theta.rows.size()) throw ConfigError("arch_log_prob: layer count mismatch");
  double lp = 0.0;
  for (size_t l = 0; l < theta.rows.size(); ++l) {
    const auto p = layer_probs(theta.rows[l].data());
    const int c = arch.choices[l];
    if (c < 0 || c >= static_cast<int>(p.size())) throw ConfigError("arch_log_prob: choice out of range");
    lp += std::log(p[static_cast<size_t>(c)]);
  }
  return lp;
}

/// Most probable candidate per layer.
inline ArchDescriptor argmax_arch(const ThetaParams& theta, const SearchSpace& space) {
  ArchDescriptor a;
  a.space_hash = space.hash;
  for (const auto& row : theta.rows) {
    const auto d = row.data();
    a.choices.push_back(static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin()));
  }
  return a;
}

/// Over-parameterized network: every candidate of every layer has its own
/// weights, and layer outputs are mask-weighted sums of all candidates.
class Supernet {
 public:
  struct Output {
    Tensor logits;
    std::vector<Tensor> masks;
    std::vector<std::vector<double>> noise;
  };

  static Supernet init(const SearchSpace& space, Rng& rng) {
    Supernet s;
    s.space_ = space;
    s.stem_ = Stem::init(space.input_channels, space.stem_channels, space.stem_stride, rng);
    for (const auto& slot : space.slots) {
      std::vector<BlockWeights> layer;
      for (const auto& cfg : slot.candidates) layer.push_back(BlockWeights::init(cfg, rng));
      s.candidates_.push_back(std::move(layer));
    }
    s.head_ = HeadConv::init(space.last_channels, space.head_width, rng);
    s.classifier_ = Classifier::init(space.head_width, space.num_classes, rng);
    s.theta_ = ThetaParams::zeros(space);
    return s;
  }

  const SearchSpace& space() const { return space_; }
  ThetaParams& theta() { return theta_; }
  const ThetaParams& theta() const { return theta_; }

  /// Draws fresh Gumbel noise (one draw per layer) and runs the relaxed forward.
  Output forward(const Tensor& x, double tau, Rng& rng, BnMode mode) {
    std::vector<std::vector<double>> noise;
    for (const auto& row : theta_.rows) noise.push_back(sample_gumbel_noise(static_cast<size_t>(row.numel()), rng));
    return forward_with_noise(x, tau, std::move(noise), mode);
  }

  /// Relaxed forward with a caller-supplied noise draw.
  Output forward_with_noise(const Tensor& x, double tau, std::vector<std::vector<double>> noise,
                            BnMode mode) {
    if (noise.size() != theta_.rows.size()) throw ConfigError("supernet: noise layer count mismatch");
    Output out;
    out.masks = masks_for(noise, tau);
    out.noise = std::move(noise);
    out.logits = forward_with_masks(x, out.masks, mode);
    return out;
  }

  std::vector<Tensor> masks_for(const std::vector<std::vector<double>>& noise, double tau) const {
    std::vector<Tensor> masks;
    for (size_t l = 0; l < theta_.rows.size(); ++l) {
      Tensor m = gumbel_softmax(theta_.rows[l], noise[l], tau);
      check_finite(m, "mask of layer " + std::to_string(l));
      masks.push_back(std::move(m));
    }
    return masks;
  }

  Tensor forward_with_masks(const Tensor& x, const std::vector<Tensor>& masks, BnMode mode) {
    const int64_t r = space_.config.input_resolution;
    if (x.rank() != 4 || x.dim(1) != space_.input_channels || x.dim(2) != r || x.dim(3) != r) {
      throw ConfigError("supernet: expected input [N," + std::to_string(space_.input_channels) + "," +
                        std::to_string(r) + "," + std::to_string(r) + "], got " + shape_str(x.shape()));
    }
    Tensor h = stem_.forward(x, mode);
    for (size_t l = 0; l < candidates_.size(); ++l) {
      const auto& slot = space_.slots[l];
      std::vector<Tensor> outs;
      outs.reserve(slot.candidates.size());
      for (size_t i = 0; i < slot.candidates.size(); ++i) {
        outs.push_back(block_forward(slot.candidates[i], candidates_[l][i], h, mode));
      }
      h = weighted_sum(outs, masks[l]);
      check_finite(h, "output of layer " + std::to_string(l));
    }
    h = head_.forward(h, mode);
    Tensor logits = classifier_.forward(h, 0.0f, nullptr, false);
    check_finite(logits, "supernet logits");
    return logits;
  }

  ParamList weight_params() const {
    ParamList out;
    stem_.append_params(out);
    for (size_t l = 0; l < candidates_.size(); ++l) {
      for (size_t i = 0; i < candidates_[l].size(); ++i) {
        candidates_[l][i].append_params(
            out, "layer" + std::to_string(l) + "." +
                     std::string(kind_name(space_.slots[l].candidates[i].kind)));
      }
    }
    head_.append_params(out);
    classifier_.append_params(out);
    return out;
  }

  ParamList theta_params() const { return theta_.params(); }

  /// Single-path network for `arch` carrying copies of the supernet weights.
  Network extract(const ArchDescriptor& arch) const {
    require_valid_arch(space_, arch);
    std::vector<BlockConfig> cfgs;
    std::vector<BlockWeights> blocks;
    for (size_t l = 0; l < candidates_.size(); ++l) {
      const auto c = static_cast<size_t>(arch.choices[l]);
      cfgs.push_back(space_.slots[l].candidates[c]);
      blocks.push_back(candidates_[l][c].deep_copy());
    }
    return Network(space_, std::move(cfgs), stem_.deep_copy(), std::move(blocks), head_.deep_copy(),
                   classifier_.deep_copy());
  }

  BlockWeights& candidate(size_t layer, size_t index) { return candidates_.at(layer).at(index); }

 private:
  SearchSpace space_;
  Stem stem_;
  std::vector<std::vector<BlockWeights>> candidates_;
  HeadConv head_;
  Classifier classifier_;
  ThetaParams theta_;
};

/// θ checkpoint: {space_hash, space, epoch, tau, rng_state, theta: {"l": [...]}}.
struct ThetaCheckpoint {
  std::string space_hash;
  json space;
  int epoch = 0;
  double tau = 0.0;
  std::string rng_state;
  std::vector<std::vector<float>> theta;

  static ThetaCheckpoint capture(const SearchSpace& sp, const ThetaParams& t, int epoch, double tau,
                                 const Rng& rng) {
    ThetaCheckpoint c;
    c.space_hash = sp.hash;
    c.space = sp.config.to_json();
    c.epoch = epoch;
    c.tau = tau;
    c.rng_state = dnas::rng_state(rng);
    for (const auto& row : t.rows) c.theta.emplace_back(row.data().begin(), row.data().end());
    return c;
  }

  json to_json() const {
    json th = json::object();
    for (size_t l = 0; l < theta.size(); ++l) th[std::to_string(l)] = theta[l];
    return {{"space_hash", space_hash}, {"space", space},         {"epoch", epoch},
            {"tau", tau},               {"rng_state", rng_state}, {"theta", th}};
  }

  static ThetaCheckpoint from_json(const json& doc) {
    const std::string where = "theta checkpoint";
    ThetaCheckpoint c;
    c.space_hash = json_required<std::string>(doc, "space_hash", where);
    c.space = doc.value("space", json::object());
    c.epoch = json_required<int>(doc, "epoch", where);
    c.tau = json_required<double>(doc, "tau", where);
    c.rng_state = json_optional<std::string>(doc, "rng_state", "", where);
    if (!doc.contains("theta") || !doc.at("theta").is_object()) {
      throw ConfigError(where + ": 'theta' must be an object keyed by layer index");
    }
    const auto& th = doc.at("theta");
    c.theta.resize(th.size());
    for (auto it = th.begin(); it != th.end(); ++it) {
      size_t l = 0;
      try {
        l = static_cast<size_t>(std::stoul(it.key()));
      } catch (const std::exception&) {
        throw ConfigError(where + ": bad layer key '" + it.key() + "'");
      }
      if (l >= c.theta.size()) throw ConfigError(where + ": layer keys must be 0..L-1");
      c.theta[l] = it.value().get<std::vector<float>>();
    }
    return c;
  }

  void save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }
  static ThetaCheckpoint load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
  }

  ThetaParams params() const {
    ThetaParams t;
    for (const auto& row : theta) {
      t.rows.push_back(Tensor({static_cast<int64_t>(row.size())}, row, true));
    }
    return t;
  }

  SearchSpace build() const { return build_space(SpaceConfig::from_json(space)); }
};

}  // namespace dnas
