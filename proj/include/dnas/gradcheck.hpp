#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dnas/ops.hpp"
#include "dnas/random.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

struct GradCheckResult {
  double max_rel_err = 0.0;  // worst over the checked tensors
  double max_abs_err = 0.0;
  size_t checked = 0;
  size_t worst_tensor = 0;
};

/// Compares backward() against central differences.
///
/// `fn` recomputes the output from the current contents of `inputs`. The
/// output is projected onto a fixed random vector r (the scalar <r, y> is
/// accumulated in double), so every output element contributes. Per input
/// tensor the error is ||analytic - numeric||_inf / max(||numeric||_inf, floor);
/// up to `max_per_tensor` coordinates are probed per tensor.
inline GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double h,
                                  size_t max_per_tensor, Rng& rng, double floor = 1e-6) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = fn();
  std::vector<float> r(static_cast<size_t>(y.numel()));
  for (auto& v : r) v = static_cast<float>(normal01(rng));
  Tensor proj(y.shape(), r);
  sum(mul(y, proj)).backward();

  auto objective = [&] {
    NoGradGuard no_grad;
    const Tensor out = fn();
    double acc = 0.0;
    for (size_t i = 0; i < r.size(); ++i) acc += static_cast<double>(r[i]) * out.data()[i];
    return acc;
  };

  GradCheckResult res;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    const size_t n = static_cast<size_t>(t.numel());
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > max_per_tensor) {
      for (size_t i = 0; i < max_per_tensor; ++i) {
        const size_t j = i + static_cast<size_t>(uniform01(rng) * static_cast<double>(n - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(max_per_tensor);
    }
    double diff = 0.0, scale = 0.0;
    for (size_t i : idx) {
      const float orig = t.data()[i];
      t.data()[i] = orig + static_cast<float>(h);
      const double fp = objective();
      t.data()[i] = orig - static_cast<float>(h);
      const double fm = objective();
      t.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = t.grad()[i];
      diff = std::max(diff, std::abs(analytic - numeric));
      scale = std::max(scale, std::abs(numeric));
      ++res.checked;
    }
    const double rel = diff / std::max(scale, floor);
    res.max_abs_err = std::max(res.max_abs_err, diff);
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_tensor = k;
    }
  }
  return res;
}

}  // namespace dnas
