#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dnas/data.hpp"
#include "dnas/errors.hpp"
#include "dnas/io.hpp"
#include "dnas/latency.hpp"
#include "dnas/ops.hpp"
#include "dnas/optim.hpp"
#include "dnas/random.hpp"
#include "dnas/search_space.hpp"
#include "dnas/supernet.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

enum class LossForm {
  multiplicative,  // CE * alpha * ln(LAT)^beta
  additive,        // CE + alpha * ln(LAT)^beta (ablation)
};

inline const char* loss_form_name(LossForm f) {
  return f == LossForm::multiplicative ? "multiplicative" : "additive";
}

inline LossForm parse_loss_form(const std::string& s) {
  if (s == "multiplicative") return LossForm::multiplicative;
  if (s == "additive") return LossForm::additive;
  throw ConfigError("unknown loss form '" + s + "'");
}

/// Latency-aware loss with latency in microseconds and natural log. Gradients
/// flow to both the cross-entropy and the latency input.
inline Tensor latency_aware_loss(const Tensor& ce, const Tensor& lat_us, double alpha, double beta,
                                 LossForm form = LossForm::multiplicative) {
  if (ce.numel() != 1 || lat_us.numel() != 1) throw ConfigError("latency_aware_loss: scalar inputs required");
  const double c = ce.item();
  const double lat = lat_us.item();
  if (!(lat > 1.0)) {
    throw NumericError("latency_aware_loss: latency must exceed 1 us, got " + std::to_string(lat));
  }
  const double ln = std::log(lat);
  const double term = alpha * std::pow(ln, beta);
  const double dterm_dlat = alpha * beta * std::pow(ln, beta - 1.0) / lat;
  double value, dce, dlat;
  if (form == LossForm::multiplicative) {
    value = c * term;
    dce = term;
    dlat = c * dterm_dlat;
  } else {
    value = c + term;
    dce = 1.0;
    dlat = dterm_dlat;
  }
  return make_result(Shape{1}, {static_cast<float>(value)}, {ce, lat_us}, "latency_aware_loss",
                     [dce, dlat](Node& self) {
                       const double g = self.grad[0];
                       Node& a = *self.inputs[0];
                       Node& b = *self.inputs[1];
                       if (a.requires_grad) a.grad[0] += static_cast<float>(g * dce);
                       if (b.requires_grad) b.grad[0] += static_cast<float>(g * dlat);
                     });
}

struct SearchHyperParams {
  double alpha = 0.2;
  double beta = 0.6;
  double tau0 = 5.0;
  double tau_decay = std::exp(-0.045);
  int epochs = 30;
  int postpone = 4;
  int batch_size = 64;
  int theta_batch_size = 0;  // 0: same as batch_size
  float w_lr = 0.1f;
  float w_momentum = 0.9f;
  float w_weight_decay = 1e-4f;
  float theta_lr = 1e-2f;
  float theta_weight_decay = 5e-4f;
  bool theta_decoupled_wd = true;  // false: classic L2 folded into the Adam gradient
  double split_fraction = 0.8;
  LossForm loss_form = LossForm::multiplicative;
  bool latency_only = false;  // ablation: CE replaced by the constant 1
  bool augment = true;
  int64_t class_subset = 0;  // 0 keeps every class

  /// Full-size protocol: 90 epochs, theta postponed 10, batch 192.
  static SearchHyperParams full_scale() {
    SearchHyperParams h;
    h.epochs = 90;
    h.postpone = 10;
    h.batch_size = 192;
    return h;
  }

  int effective_theta_batch() const { return theta_batch_size > 0 ? theta_batch_size : batch_size; }

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("hyper: alpha must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("hyper: beta must be >= 0");
    if (!(tau0 > 0.0)) throw ConfigError("hyper: tau0 must be > 0");
    if (!(tau_decay > 0.0 && tau_decay <= 1.0)) throw ConfigError("hyper: tau decay must be in (0, 1]");
    if (epochs < 0) throw ConfigError("hyper: epochs must be >= 0");
    if (postpone < 0 || (epochs > 0 && postpone >= epochs)) {
      throw ConfigError("hyper: postpone must be in [0, epochs)");
    }
    if (batch_size < 2) throw ConfigError("hyper: batch size must be >= 2");
    if (theta_batch_size != 0 && theta_batch_size < 2) {
      throw ConfigError("hyper: theta batch size must be 0 or >= 2");
    }
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("hyper: split must be in (0, 1)");
    if (!(w_lr > 0.0f) || !(theta_lr > 0.0f)) throw ConfigError("hyper: learning rates must be > 0");
  }

  json to_json() const {
    return {{"alpha", alpha},
            {"beta", beta},
            {"tau0", tau0},
            {"tau_decay", tau_decay},
            {"epochs", epochs},
            {"postpone", postpone},
            {"batch_size", batch_size},
            {"theta_batch_size", theta_batch_size},
            {"w_lr", w_lr},
            {"w_momentum", w_momentum},
            {"w_weight_decay", w_weight_decay},
            {"theta_lr", theta_lr},
            {"theta_weight_decay", theta_weight_decay},
            {"theta_decoupled_wd", theta_decoupled_wd},
            {"split_fraction", split_fraction},
            {"loss_form", loss_form_name(loss_form)},
            {"latency_only", latency_only},
            {"augment", augment},
            {"class_subset", class_subset}};
  }
};

/// tau(e) = tau0 * decay^max(0, e).
inline double temperature_at(const SearchHyperParams& h, int epoch) {
  return h.tau0 * std::pow(h.tau_decay, std::max(0, epoch));
}

struct EpochMetrics {
  int epoch = 0;
  std::string phase;  // "weights" or "theta"
  double tau = 0.0;
  double ce = std::numeric_limits<double>::quiet_NaN();
  double expected_lat_us = 0.0;
  double entropy_nats = 0.0;
  double lr = 0.0;

  json to_json() const {
    json j = {{"epoch", epoch},
              {"phase", phase},
              {"tau", tau},
              {"expected_lat_us", expected_lat_us},
              {"entropy_nats", entropy_nats},
              {"lr", lr}};
    j["ce"] = std::isfinite(ce) ? json(ce) : json(nullptr);
    return j;
  }

  static EpochMetrics from_json(const json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.phase = j.at("phase").get<std::string>();
    m.tau = j.at("tau").get<double>();
    m.ce = j.at("ce").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("ce").get<double>();
    m.expected_lat_us = j.at("expected_lat_us").get<double>();
    m.entropy_nats = j.at("entropy_nats").get<double>();
    m.lr = j.value("lr", 0.0);
    return m;
  }
};

/// Σ_l Σ_i P_theta(l, i) * LAT(l, i) + fixed ops: the exact expectation of
/// the table latency under the current distribution.
inline double expected_latency_under_probs(const LatencyModel& model, const ThetaParams& theta) {
  return expected_latency_value(model, theta.probs());
}

/// Everything the alternating search mutates.
struct SearchState {
  SearchSpace space;
  LatencyModel model;
  SearchHyperParams hyper;
  Supernet supernet;
  std::unique_ptr<SgdMomentum> sgd;
  std::unique_ptr<AdamState> adam;
  Rng rng;
  int epoch = 0;
  double tau = 0.0;
  std::vector<EpochMetrics> history;

  Dataset data;
  Normalization norm;
  std::vector<size_t> weight_split;  // part used for operator weights
  std::vector<size_t> theta_split;   // held-out part used for theta
};

inline std::unique_ptr<SearchState> make_search_state(const SearchSpace& space, const LatencyTable& lut,
                                                      const SearchHyperParams& hyper,
                                                      const Dataset& dataset, uint64_t seed,
                                                      std::optional<Normalization> norm = std::nullopt) {
  hyper.validate();
  auto st = std::make_unique<SearchState>();
  st->space = space;
  st->model = LatencyModel::from(lut, space);
  st->hyper = hyper;
  st->rng = derive_rng(seed, 1);
  Rng init_rng = derive_rng(seed, 2);
  st->supernet = Supernet::init(space, init_rng);
  st->sgd = std::make_unique<SgdMomentum>(st->supernet.weight_params(), hyper.w_lr, hyper.w_momentum,
                                          hyper.w_weight_decay);
  st->adam = std::make_unique<AdamState>(st->supernet.theta_params(), hyper.theta_lr,
                                         hyper.theta_weight_decay);
  st->adam->set_decoupled(hyper.theta_decoupled_wd);
  st->data = hyper.class_subset > 0 ? select_classes(dataset, hyper.class_subset, seed) : dataset;
  if (st->data.resolution != space.config.input_resolution) {
    throw ConfigError("dataset resolution " + std::to_string(st->data.resolution) +
                      " does not match space input resolution " +
                      std::to_string(space.config.input_resolution));
  }
  if (st->data.num_classes != space.num_classes) {
    throw ConfigError("dataset has " + std::to_string(st->data.num_classes) + " classes, space expects " +
                      std::to_string(space.num_classes));
  }
  st->norm = norm ? *norm : Normalization::compute(st->data);
  const SplitIndices parts = split(st->data, {hyper.split_fraction, seed});
  st->weight_split = parts.a;
  st->theta_split = parts.b;
  st->tau = temperature_at(hyper, 0);
  return st;
}

namespace detail {

inline std::vector<std::vector<size_t>> make_batches(std::vector<size_t> idx, int batch_size, Rng& rng) {
  shuffle_indices(idx, rng);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < idx.size(); i += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(idx.size(), i + static_cast<size_t>(batch_size));
    if (end - i < 2) break;  // batch norm needs two samples
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i), idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline void check_divergence(double loss, int epoch, const char* phase) {
  if (!std::isfinite(loss) || loss > 1e4) {
    throw NumericError(std::string("search diverged in ") + phase + " phase at epoch " +
                       std::to_string(epoch) + ": loss " + std::to_string(loss));
  }
}

}  // namespace detail

/// One pass over the weight split: SGD on operator weights, theta frozen.
inline EpochMetrics train_weights_epoch(SearchState& st) {
  auto& h = st.hyper;
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = "weights";
  m.tau = st.tau;
  m.lr = cosine_lr(st.epoch, h.epochs, h.w_lr);
  ParamList weights = st.supernet.weight_params();
  ParamList theta = st.supernet.theta_params();
  set_requires_grad(theta, false);
  set_requires_grad(weights, true);
  double ce_sum = 0.0, lat_sum = 0.0;
  int steps = 0;
  if (!h.latency_only) {
    for (const auto& batch_idx : detail::make_batches(st.weight_split, h.batch_size, st.rng)) {
      Batch b = make_batch(st.data, batch_idx, st.norm);
      Tensor x = h.augment ? augment(b.images, st.rng, AugmentMode::train) : b.images;
      st.sgd->zero_grad();
      auto out = st.supernet.forward(x, st.tau, st.rng, BnMode::train);
      Tensor ce = cross_entropy(out.logits, b.labels);
      Tensor lat = expected_latency(st.model, out.masks);
      Tensor loss = latency_aware_loss(ce, lat, h.alpha, h.beta, h.loss_form);
      detail::check_divergence(loss.item(), st.epoch, "weights");
      loss.backward();
      st.sgd->step(m.lr);
      ce_sum += ce.item();
      lat_sum += lat.item();
      ++steps;
    }
  }
  set_requires_grad(theta, true);
  m.ce = steps ? ce_sum / steps : std::numeric_limits<double>::quiet_NaN();
  m.expected_lat_us = steps ? lat_sum / steps : expected_latency_under_probs(st.model, st.supernet.theta());
  m.entropy_nats = arch_entropy(st.supernet.theta());
  return m;
}

/// One pass over the theta split with Adam; operator weights frozen. Returns
/// nothing while the epoch is inside the postponement window.
inline std::optional<EpochMetrics> train_theta_epoch(SearchState& st) {
  auto& h = st.hyper;
  if (st.epoch < h.postpone) return std::nullopt;
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = "theta";
  m.tau = st.tau;
  m.lr = h.theta_lr;
  ParamList weights = st.supernet.weight_params();
  set_requires_grad(weights, false);
  double ce_sum = 0.0, lat_sum = 0.0;
  int steps = 0;
  for (const auto& batch_idx : detail::make_batches(st.theta_split, h.effective_theta_batch(), st.rng)) {
    st.adam->zero_grad();
    Tensor loss, lat;
    if (h.latency_only) {
      std::vector<std::vector<double>> noise;
      for (const auto& row : st.supernet.theta().rows) {
        noise.push_back(sample_gumbel_noise(static_cast<size_t>(row.numel()), st.rng));
      }
      auto masks = st.supernet.masks_for(noise, st.tau);
      lat = expected_latency(st.model, masks);
      loss = latency_aware_loss(Tensor::scalar(1.0f), lat, h.alpha, h.beta, h.loss_form);
    } else {
      Batch b = make_batch(st.data, batch_idx, st.norm);
      auto out = st.supernet.forward(b.images, st.tau, st.rng, BnMode::train_frozen);
      Tensor ce = cross_entropy(out.logits, b.labels);
      lat = expected_latency(st.model, out.masks);
      loss = latency_aware_loss(ce, lat, h.alpha, h.beta, h.loss_form);
      ce_sum += ce.item();
    }
    detail::check_divergence(loss.item(), st.epoch, "theta");
    loss.backward();
    st.adam->step();
    lat_sum += lat.item();
    ++steps;
  }
  set_requires_grad(weights, true);
  m.ce = (steps && !h.latency_only) ? ce_sum / steps : std::numeric_limits<double>::quiet_NaN();
  m.expected_lat_us = steps ? lat_sum / steps : expected_latency_under_probs(st.model, st.supernet.theta());
  m.entropy_nats = arch_entropy(st.supernet.theta());
  return m;
}

/// Runs one full epoch (weights phase, then theta phase) and anneals tau.
inline std::vector<EpochMetrics> run_epoch(SearchState& st) {
  std::vector<EpochMetrics> out;
  st.tau = temperature_at(st.hyper, st.epoch);
  if (!st.hyper.latency_only) out.push_back(train_weights_epoch(st));
  if (auto t = train_theta_epoch(st)) out.push_back(*t);
  for (const auto& m : out) st.history.push_back(m);
  ++st.epoch;
  st.tau = temperature_at(st.hyper, st.epoch);
  return out;
}

struct SearchResult {
  std::unique_ptr<SearchState> state;
  ThetaCheckpoint checkpoint;
  double initial_entropy = 0.0;
  double final_entropy = 0.0;
};

/// Alternating search: per epoch train weights on the 80% part, then theta on
/// the held-out 20% part (after the postponement window).
inline SearchResult run_search(const SearchSpace& space, const LatencyTable& lut,
                               const SearchHyperParams& hyper, const Dataset& dataset, uint64_t seed,
                               const std::function<void(const EpochMetrics&)>& on_metrics = nullptr,
                               std::optional<Normalization> norm = std::nullopt) {
  SearchResult r;
  r.state = make_search_state(space, lut, hyper, dataset, seed, norm);
  SearchState& st = *r.state;
  r.initial_entropy = arch_entropy(st.supernet.theta());
  for (int e = 0; e < hyper.epochs; ++e) {
    for (const auto& m : run_epoch(st)) {
      if (on_metrics) on_metrics(m);
    }
  }
  r.final_entropy = arch_entropy(st.supernet.theta());
  r.checkpoint = ThetaCheckpoint::capture(space, st.supernet.theta(), st.epoch, st.tau, st.rng);
  return r;
}

// ---------------------------------------------------------------------------
// Retraining a sampled architecture

struct RetrainParams {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 4e-5f;
  int batch_size = 64;
  float dropout = 0.2f;
  bool augment = true;
  int bench_repeats = 20;
  int bench_warmup = 3;
};

struct RetrainMetrics {
  double top1 = 0.0;
  int64_t param_count = 0;
  int64_t flops = 0;
  std::optional<double> predicted_latency_us;
  double measured_latency_us = 0.0;
  std::vector<double> epoch_loss;

  json to_json() const {
    return {{"top1", top1},
            {"param_count", param_count},
            {"flops", flops},
            {"predicted_latency_us", predicted_latency_us ? json(*predicted_latency_us) : json(nullptr)},
            {"measured_latency_us", measured_latency_us}};
  }
};

/// Top-1 accuracy in eval mode.
inline double evaluate_top1(Network& net, const Dataset& ds, std::span<const size_t> indices,
                            const Normalization& norm, int batch_size = 256) {
  if (indices.empty()) return 0.0;
  NoGradGuard no_grad;
  size_t correct = 0;
  for (size_t i = 0; i < indices.size(); i += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(indices.size(), i + static_cast<size_t>(batch_size));
    Batch b = make_batch(ds, indices.subspan(i, end - i), norm);
    Tensor logits = net.forward(b.images, BnMode::eval);
    const int64_t m = logits.dim(1);
    for (size_t r = 0; r < b.labels.size(); ++r) {
      const float* row = logits.data().data() + r * static_cast<size_t>(m);
      const auto pred = std::max_element(row, row + m) - row;
      if (pred == b.labels[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Trains `arch` from fresh weights with SGD-momentum and step decay at 25%,
/// 50% and 75% of the run, dropout before the classifier, then reports
/// held-out accuracy, size, multiply-adds and latency.
inline RetrainMetrics train_from_scratch(const SearchSpace& space, const ArchDescriptor& arch,
                                         const Dataset& dataset, std::span<const size_t> train_idx,
                                         std::span<const size_t> test_idx, int epochs,
                                         const RetrainParams& params, uint64_t seed,
                                         const LatencyTable* lut = nullptr,
                                         std::optional<Normalization> norm = std::nullopt,
                                         const std::function<void(int, double)>& on_epoch = nullptr) {
  require_valid_arch(space, arch);
  if (epochs < 0) throw ConfigError("train_from_scratch: epochs must be >= 0");
  Rng rng = derive_rng(seed, 3);
  Network net = materialize(space, arch, rng);
  net.dropout = params.dropout;
  const Normalization nm = norm ? *norm : Normalization::compute(dataset);
  SgdMomentum sgd(net.params(), params.lr, params.momentum, params.weight_decay);
  RetrainMetrics out;
  std::vector<size_t> train(train_idx.begin(), train_idx.end());
  for (int e = 0; e < epochs; ++e) {
    const float lr = step_decay_lr(e, epochs, params.lr);
    double loss_sum = 0.0;
    int steps = 0;
    for (const auto& batch_idx : detail::make_batches(train, params.batch_size, rng)) {
      Batch b = make_batch(dataset, batch_idx, nm);
      Tensor x = params.augment ? augment(b.images, rng, AugmentMode::train) : b.images;
      sgd.zero_grad();
      Tensor loss = cross_entropy(net.forward(x, BnMode::train, &rng), b.labels);
      detail::check_divergence(loss.item(), e, "retrain");
      loss.backward();
      sgd.step(lr);
      loss_sum += loss.item();
      ++steps;
    }
    out.epoch_loss.push_back(steps ? loss_sum / steps : 0.0);
    if (on_epoch) on_epoch(e, out.epoch_loss.back());
  }
  out.top1 = evaluate_top1(net, dataset, test_idx, nm);
  out.param_count = net.param_count();
  out.flops = arch_flops(space, arch);
  if (lut) out.predicted_latency_us = arch_latency(*lut, space, arch);
  {
    NoGradGuard no_grad;
    const int64_t r = space.config.input_resolution;
    const Tensor x = random_input({1, space.input_channels, r, r}, rng);
    volatile float sink = 0.0f;
    out.measured_latency_us =
        bench_callable([&] { sink = sink + net.forward(x, BnMode::eval).data()[0]; },
                       params.bench_repeats, params.bench_warmup)
            .median_us;
  }
  return out;
}

}  // namespace dnas
