#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dnas/errors.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline int64_t param_count(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

inline void set_requires_grad(ParamList& params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

namespace detail {
inline void check_step_inputs(const NamedParam& p, float lr) {
  if (!(lr > 0.0f)) throw ConfigError("optimizer step: learning rate must be > 0");
  if (!p.tensor.requires_grad()) {
    throw ConfigError("optimizer step: parameter '" + p.name + "' has no gradient buffer");
  }
  const auto g = p.tensor.grad();
  for (size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw NumericError("non-finite gradient in parameter '" + p.name + "' at index " +
                         std::to_string(i) + " (shape " + shape_str(p.tensor.shape()) + ")");
    }
  }
}
}  // namespace detail

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
class SgdMomentum {
 public:
  SgdMomentum(ParamList params, float learning_rate, float momentum = 0.9f,
              float weight_decay = 0.0f)
      : params_(std::move(params)),
        learning_rate_(learning_rate),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0f);
  }

  void step() { step(learning_rate_); }

  void step(float lr) {
    for (const auto& p : params_) detail::check_step_inputs(p, lr);
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor t = params_[k].tensor;
      auto w = t.data();
      const auto g = t.grad();
      auto& v = velocity_[k];
      for (size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
        w[i] -= lr * v[i];
      }
    }
  }

  void zero_grad() { zero_grads(params_); }

  float learning_rate() const { return learning_rate_; }
  float momentum() const { return momentum_; }
  float weight_decay() const { return weight_decay_; }
  const ParamList& params() const { return params_; }
  const std::vector<std::vector<float>>& velocity() const { return velocity_; }

 private:
  ParamList params_;
  float learning_rate_;
  float momentum_;
  float weight_decay_;
  std::vector<std::vector<float>> velocity_;
};

/// Bias-corrected Adam; weight decay is folded into the gradient before the
/// moment updates.
class AdamState {
 public:
  AdamState(ParamList params, float learning_rate, float weight_decay = 0.0f,
            float beta1 = 0.9f, float beta2 = 0.999f, float epsilon = 1e-8f)
      : params_(std::move(params)),
        learning_rate_(learning_rate),
        beta1_(beta1),
        beta2_(beta2),
        epsilon_(epsilon),
        weight_decay_(weight_decay) {
    for (const auto& p : params_) {
      first_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0f);
      second_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0f);
    }
  }

  void step() { step(learning_rate_); }

  void step(float lr) {
    for (const auto& p : params_) detail::check_step_inputs(p, lr);
    ++steps_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(steps_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor t = params_[k].tensor;
      auto w = t.data();
      const auto g = t.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (size_t i = 0; i < w.size(); ++i) {
        const float gi = decoupled_ ? g[i] : g[i] + weight_decay_ * w[i];
        m[i] = beta1_ * m[i] + (1.0f - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0f - beta2_) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + epsilon_));
        if (decoupled_) w[i] -= lr * weight_decay_ * w[i];
      }
    }
  }

  /// Decay the weights directly instead of folding wd * w into the gradient.
  /// The folded form is divided by sqrt(v), so with tiny gradients it
  /// dominates the update.
  AdamState& set_decoupled(bool on) {
    decoupled_ = on;
    return *this;
  }
  bool decoupled() const { return decoupled_; }

  void zero_grad() { zero_grads(params_); }

  int64_t steps() const { return steps_; }
  float learning_rate() const { return learning_rate_; }
  float weight_decay() const { return weight_decay_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  float learning_rate_;
  float beta1_, beta2_, epsilon_;
  float weight_decay_;
  bool decoupled_ = false;
  int64_t steps_ = 0;
  std::vector<std::vector<float>> first_, second_;
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs)).
inline float cosine_lr(int epoch, int total_epochs, float lr0) {
  if (total_epochs <= 0) return lr0;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return static_cast<float>(lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

/// Divides lr0 by 10 at each of 25%, 50% and 75% of the run.
inline float step_decay_lr(int epoch, int total_epochs, float lr0) {
  float lr = lr0;
  for (int q = 1; q <= 3; ++q) {
    const int milestone = (total_epochs * q) / 4;
    if (total_epochs > 0 && epoch >= milestone && milestone > 0) lr *= 0.1f;
  }
  return lr;
}

}  // namespace dnas
