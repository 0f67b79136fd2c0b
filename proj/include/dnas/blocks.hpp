#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>

#include "dnas/errors.hpp"
#include "dnas/ops.hpp"
#include "dnas/optim.hpp"
#include "dnas/random.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// Candidate block vocabulary. The enumerator value doubles as the candidate
/// index inside a layer slot; skip is last so slots that cannot host it just
/// drop the tail entry.
enum class BlockKind : int {
  k3_e1 = 0,
  k3_e1_g2,
  k3_e3,
  k3_e6,
  k5_e1,
  k5_e1_g2,
  k5_e3,
  k5_e6,
  skip,
};

inline constexpr int kNumBlockKinds = 9;

struct KindSpec {
  BlockKind kind;
  std::string_view name;
  int expansion;  // 0 for skip
  int kernel;     // 0 for skip
  int groups;     // 0 for skip
};

inline constexpr std::array<KindSpec, kNumBlockKinds> kBlockTable{{
    {BlockKind::k3_e1, "k3_e1", 1, 3, 1},
    {BlockKind::k3_e1_g2, "k3_e1_g2", 1, 3, 2},
    {BlockKind::k3_e3, "k3_e3", 3, 3, 1},
    {BlockKind::k3_e6, "k3_e6", 6, 3, 1},
    {BlockKind::k5_e1, "k5_e1", 1, 5, 1},
    {BlockKind::k5_e1_g2, "k5_e1_g2", 1, 5, 2},
    {BlockKind::k5_e3, "k5_e3", 3, 5, 1},
    {BlockKind::k5_e6, "k5_e6", 6, 5, 1},
    {BlockKind::skip, "skip", 0, 0, 0},
}};

inline const KindSpec& kind_spec(BlockKind kind) {
  return kBlockTable.at(static_cast<size_t>(kind));
}

inline std::string_view kind_name(BlockKind kind) { return kind_spec(kind).name; }

inline BlockKind parse_kind(std::string_view name) {
  for (const auto& row : kBlockTable) {
    if (row.name == name) return row.kind;
  }
  throw ConfigError("unknown block kind '" + std::string(name) + "'");
}

struct BlockConfig {
  BlockKind kind = BlockKind::skip;
  int expansion = 0;
  int kernel = 0;
  int groups = 0;
  int stride = 1;
  int64_t c_in = 0;
  int64_t c_out = 0;

  bool is_skip() const { return kind == BlockKind::skip; }
  int64_t hidden() const { return expansion * c_in; }
  bool has_residual() const { return !is_skip() && stride == 1 && c_in == c_out; }

  /// Fills (e, K, g) from the kind table and validates channel divisibility.
  static BlockConfig make(BlockKind kind, int64_t c_in, int64_t c_out, int stride) {
    const KindSpec& spec = kind_spec(kind);
    BlockConfig cfg{kind, spec.expansion, spec.kernel, spec.groups, stride, c_in, c_out};
    cfg.validate();
    return cfg;
  }

  void validate() const {
    const std::string tag = std::string(kind_name(kind)) + "(" + std::to_string(c_in) + "->" +
                            std::to_string(c_out) + ", s" + std::to_string(stride) + ")";
    if (stride != 1 && stride != 2) throw ConfigError(tag + ": stride must be 1 or 2");
    if (c_in < 1 || c_out < 1) throw ConfigError(tag + ": channel counts must be positive");
    if (is_skip()) {
      if (stride != 1 || c_in != c_out) {
        throw ConfigError(tag + ": skip requires stride 1 and equal input/output channels");
      }
      return;
    }
    if (c_in % groups != 0 || hidden() % groups != 0 || c_out % groups != 0) {
      throw ConfigError(tag + ": groups=" + std::to_string(groups) +
                        " must divide input, expanded and output channels");
    }
  }
};

inline bool skip_legal(int64_t c_in, int64_t c_out, int stride) {
  return stride == 1 && c_in == c_out;
}

inline Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0f, true);
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Convolution (no bias) followed by batch norm.
struct ConvBn {
  Tensor weight;  // [O, C/groups, K, K]
  Tensor gamma;
  Tensor beta;
  BnStats stats;
  int stride = 1;
  int groups = 1;

  static ConvBn init(int64_t c_in, int64_t c_out, int kernel, int stride, int groups, Rng& rng) {
    ConvBn cb;
    cb.weight = he_normal({c_out, c_in / groups, kernel, kernel}, (c_in / groups) * kernel * kernel,
                          rng);
    cb.gamma = Tensor::ones({c_out}, true);
    cb.beta = Tensor::zeros({c_out}, true);
    cb.stats = BnStats(c_out);
    cb.stride = stride;
    cb.groups = groups;
    return cb;
  }

  int kernel() const { return static_cast<int>(weight.dim(2)); }

  Tensor forward(const Tensor& x, BnMode mode) {
    Tensor y = conv2d(x, weight, stride, (kernel() - 1) / 2, groups);
    return batch_norm(y, gamma, beta, stats, mode);
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }

  ConvBn deep_copy() const {
    ConvBn cb = *this;
    cb.weight = weight.clone(weight.requires_grad());
    cb.gamma = gamma.clone(gamma.requires_grad());
    cb.beta = beta.clone(beta.requires_grad());
    return cb;
  }
};

/// Weights for one candidate block: expand 1x1, depthwise KxK, project 1x1,
/// each followed by batch norm. Skip blocks hold nothing.
struct BlockWeights {
  ConvBn expand;
  ConvBn depthwise;
  ConvBn project;

  static BlockWeights init(const BlockConfig& cfg, Rng& rng) {
    BlockWeights w;
    if (cfg.is_skip()) return w;
    const int64_t hidden = cfg.hidden();
    w.expand = ConvBn::init(cfg.c_in, hidden, 1, 1, cfg.groups, rng);
    w.depthwise = ConvBn::init(hidden, hidden, cfg.kernel, cfg.stride, static_cast<int>(hidden), rng);
    w.project = ConvBn::init(hidden, cfg.c_out, 1, 1, cfg.groups, rng);
    return w;
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    if (!expand.weight.defined()) return;
    expand.append_params(out, prefix + ".expand");
    depthwise.append_params(out, prefix + ".dw");
    project.append_params(out, prefix + ".project");
  }

  BlockWeights deep_copy() const {
    if (!expand.weight.defined()) return {};
    return {expand.deep_copy(), depthwise.deep_copy(), project.deep_copy()};
  }
};

/// expand(+shuffle) -> BN -> ReLU -> depthwise -> BN -> ReLU -> project(+shuffle)
/// -> BN, plus the identity shortcut when stride is 1 and channels match.
inline Tensor block_forward(const BlockConfig& cfg, BlockWeights& w, const Tensor& x, BnMode mode) {
  if (x.rank() != 4 || x.dim(1) != cfg.c_in) {
    throw ConfigError("block " + std::string(kind_name(cfg.kind)) + ": expected " +
                      std::to_string(cfg.c_in) + " input channels, got shape " +
                      shape_str(x.shape()));
  }
  if (cfg.is_skip()) {
    if (!skip_legal(cfg.c_in, cfg.c_out, cfg.stride)) {
      throw ConfigError("skip block requires stride 1 and equal channels");
    }
    return x;
  }
  Tensor h = conv2d(x, w.expand.weight, 1, 0, cfg.groups);
  if (cfg.groups > 1) h = channel_shuffle(h, cfg.groups);
  h = relu(batch_norm(h, w.expand.gamma, w.expand.beta, w.expand.stats, mode));
  h = relu(w.depthwise.forward(h, mode));
  Tensor y = conv2d(h, w.project.weight, 1, 0, cfg.groups);
  if (cfg.groups > 1) y = channel_shuffle(y, cfg.groups);
  y = batch_norm(y, w.project.gamma, w.project.beta, w.project.stats, mode);
  if (cfg.has_residual()) y = add(y, x);
  return y;
}

/// Trainable parameters: three conv weights plus gamma/beta for each BN.
inline int64_t block_param_count(const BlockConfig& cfg) {
  if (cfg.is_skip()) return 0;
  const int64_t hidden = cfg.hidden();
  const int64_t k2 = static_cast<int64_t>(cfg.kernel) * cfg.kernel;
  const int64_t expand = hidden * (cfg.c_in / cfg.groups);
  const int64_t dw = hidden * k2;
  const int64_t project = cfg.c_out * (hidden / cfg.groups);
  const int64_t bn = 2 * (hidden + hidden + cfg.c_out);
  return expand + dw + project + bn;
}

inline int64_t out_extent(int64_t in, int stride) { return (in + stride - 1) / stride; }

/// Multiply-adds of the three convolutions at input resolution h x w.
inline int64_t block_flops(const BlockConfig& cfg, int64_t h, int64_t w) {
  if (cfg.is_skip()) return 0;
  const int64_t hidden = cfg.hidden();
  const int64_t k2 = static_cast<int64_t>(cfg.kernel) * cfg.kernel;
  const int64_t oh = out_extent(h, cfg.stride), ow = out_extent(w, cfg.stride);
  const int64_t expand = (cfg.c_in / cfg.groups) * hidden * h * w;
  const int64_t dw = k2 * hidden * oh * ow;
  const int64_t project = (hidden / cfg.groups) * cfg.c_out * oh * ow;
  return expand + dw + project;
}

/// 3x3 conv + BN + ReLU at the network input.
struct Stem {
  ConvBn conv;

  static Stem init(int64_t c_in, int64_t c_out, int stride, Rng& rng) {
    return {ConvBn::init(c_in, c_out, 3, stride, 1, rng)};
  }
  Tensor forward(const Tensor& x, BnMode mode) { return relu(conv.forward(x, mode)); }
  void append_params(ParamList& out) const { conv.append_params(out, "stem"); }
  Stem deep_copy() const { return {conv.deep_copy()}; }

  static int64_t param_count(int64_t c_in, int64_t c_out) { return c_out * c_in * 9 + 2 * c_out; }
  static int64_t flops(int64_t c_in, int64_t c_out, int stride, int64_t h, int64_t w) {
    return 9 * c_in * c_out * out_extent(h, stride) * out_extent(w, stride);
  }
};

/// Final 1x1 conv + BN + ReLU.
struct HeadConv {
  ConvBn conv;

  static HeadConv init(int64_t c_in, int64_t c_out, Rng& rng) {
    return {ConvBn::init(c_in, c_out, 1, 1, 1, rng)};
  }
  Tensor forward(const Tensor& x, BnMode mode) { return relu(conv.forward(x, mode)); }
  void append_params(ParamList& out) const { conv.append_params(out, "head_conv"); }
  HeadConv deep_copy() const { return {conv.deep_copy()}; }

  static int64_t param_count(int64_t c_in, int64_t c_out) { return c_in * c_out + 2 * c_out; }
  static int64_t flops(int64_t c_in, int64_t c_out, int64_t h, int64_t w) {
    return c_in * c_out * h * w;
  }
};

/// Global average pool, optional dropout, then the fully connected layer.
struct Classifier {
  Tensor weight;  // [D, M]
  Tensor bias;    // [M]

  static Classifier init(int64_t in_features, int64_t classes, Rng& rng) {
    Classifier c;
    std::normal_distribution<float> dist(0.0f, 0.01f);
    c.weight = Tensor({in_features, classes}, 0.0f, true);
    for (auto& v : c.weight.data()) v = dist(rng);
    c.bias = Tensor::zeros({classes}, true);
    return c;
  }

  Tensor forward(const Tensor& x, float dropout_p, Rng* rng, bool training) {
    Tensor pooled = flatten(avg_pool_global(x));
    if (training && dropout_p > 0.0f && rng != nullptr) pooled = dropout(pooled, dropout_p, *rng, true);
    return fully_connected(pooled, weight, bias);
  }
  void append_params(ParamList& out) const {
    out.push_back({"fc.weight", weight});
    out.push_back({"fc.bias", bias});
  }
  Classifier deep_copy() const {
    return {weight.clone(weight.requires_grad()), bias.clone(bias.requires_grad())};
  }

  static int64_t param_count(int64_t in_features, int64_t classes) {
    return in_features * classes + classes;
  }
  static int64_t flops(int64_t in_features, int64_t classes) { return in_features * classes; }
};

}  // namespace dnas
