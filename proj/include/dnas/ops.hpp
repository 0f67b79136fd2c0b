#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dnas/errors.hpp"
#include "dnas/parallel.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

namespace detail {

inline void require_rank(const Tensor& t, size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got shape " + shape_str(t.shape()));
  }
}

// dst += a * src
inline void axpy(float* __restrict dst, const float* __restrict src, float a, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

// dst += a0*s0 + a1*s1 + a2*s2 + a3*s3
inline void axpy4(float* __restrict dst, const float* __restrict s0, const float* __restrict s1,
                  const float* __restrict s2, const float* __restrict s3, const float* a, int64_t n) {
  const float a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
  for (int64_t i = 0; i < n; ++i) dst[i] += (a0 * s0[i] + a1 * s1[i]) + (a2 * s2[i] + a3 * s3[i]);
}

// dst += sum_j a[j] * s[j] for eight sources
inline void axpy8(float* __restrict dst, const float* const* s, const float* a, int64_t n) {
  const float* __restrict s0 = s[0];
  const float* __restrict s1 = s[1];
  const float* __restrict s2 = s[2];
  const float* __restrict s3 = s[3];
  const float* __restrict s4 = s[4];
  const float* __restrict s5 = s[5];
  const float* __restrict s6 = s[6];
  const float* __restrict s7 = s[7];
  const float a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3], a4 = a[4], a5 = a[5], a6 = a[6], a7 = a[7];
  for (int64_t i = 0; i < n; ++i) {
    dst[i] += ((a0 * s0[i] + a1 * s1[i]) + (a2 * s2[i] + a3 * s3[i])) +
              ((a4 * s4[i] + a5 * s5[i]) + (a6 * s6[i] + a7 * s7[i]));
  }
}

// dst += sum_j a[j] * s[j] over any number of sources, eight at a time
inline void axpy_many(float* dst, const float* const* s, const float* a, int64_t count, int64_t n) {
  int64_t j = 0;
  for (; j + 8 <= count; j += 8) axpy8(dst, s + j, a + j, n);
  for (; j + 4 <= count; j += 4) axpy4(dst, s[j], s[j + 1], s[j + 2], s[j + 3], a + j, n);
  for (; j < count; ++j) axpy(dst, s[j], a[j], n);
}

// Fixed 32-lane partial sums (four 8-wide accumulators) so the result does
// not depend on the compiler's choice to vectorize.
inline float dot(const float* __restrict a, const float* __restrict b, int64_t n) {
  typedef float v8 __attribute__((vector_size(32)));
  v8 acc[4] = {};
  int64_t i = 0;
  for (; i + 32 <= n; i += 32) {
    for (int k = 0; k < 4; ++k) {
      v8 x, y;
      std::memcpy(&x, a + i + 8 * k, sizeof x);
      std::memcpy(&y, b + i + 8 * k, sizeof y);
      acc[k] += x * y;
    }
  }
  for (; i + 8 <= n; i += 8) {
    v8 x, y;
    std::memcpy(&x, a + i, sizeof x);
    std::memcpy(&y, b + i, sizeof y);
    acc[0] += x * y;
  }
  const v8 s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  float lane[8];
  std::memcpy(lane, &s, sizeof lane);
  for (int64_t j = 0; i < n; ++i, ++j) lane[j] += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

// Double-precision reductions with fixed 4-lane partial sums.
inline double sum_d(const float* __restrict a, int64_t n) {
  double lane[4] = {0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (int j = 0; j < 4; ++j) lane[j] += a[i + j];
  }
  for (; i < n; ++i) lane[i % 4] += a[i];
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

inline double dot_d(const float* __restrict a, const float* __restrict b, int64_t n) {
  double lane[4] = {0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (int j = 0; j < 4; ++j) lane[j] += static_cast<double>(a[i + j]) * b[i + j];
  }
  for (; i < n; ++i) lane[i % 4] += static_cast<double>(a[i]) * b[i];
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

// sum_i (a[i] - mean)^2
inline double sq_dev_d(const float* __restrict a, double mean, int64_t n) {
  double lane[4] = {0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (int j = 0; j < 4; ++j) {
      const double d = a[i + j] - mean;
      lane[j] += d * d;
    }
  }
  for (; i < n; ++i) {
    const double d = a[i] - mean;
    lane[i % 4] += d * d;
  }
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

inline void add_to(float* __restrict dst, const float* __restrict src, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

struct ConvGeom {
  int64_t n, c, h, w, o, k, oh, ow, cpg, opg;
  int stride, pad, groups;
  // Stencil layout: per channel, stride*stride phase planes of the zero-padded
  // input, each holding all samples back to back ([N][qh][qw]). Phase (a, b)
  // holds padded[s*i + a][s*j + b], so tap (kh, kw) is a constant flat offset
  // into phase (kh % s, kw % s) and one loop of length `span` covers the whole
  // batch. Positions outside the oh x ow window are scratch.
  int64_t qh, qw, qplane, span, phase_len, chan_len;

  int64_t tap_phase(int64_t kh, int64_t kw) const { return (kh % stride) * stride + kw % stride; }
  int64_t tap_offset(int64_t kh, int64_t kw) const { return (kh / stride) * qw + kw / stride; }
  const float* tap(const float* chan, int64_t kh, int64_t kw) const {
    return chan + tap_phase(kh, kw) * phase_len + tap_offset(kh, kw);
  }
  float* tap(float* chan, int64_t kh, int64_t kw) const {
    return chan + tap_phase(kh, kw) * phase_len + tap_offset(kh, kw);
  }
};

// Calls fn(dst_offset, src_x0, count) for each column phase of one input row:
// destination j0 + t (within the phase row) receives source column x0 + t*stride.
template <typename Fn>
inline void for_row_phases(const ConvGeom& g, Fn&& fn) {
  for (int64_t b = 0; b < g.stride; ++b) {
    const int64_t x0 = ((b - g.pad) % g.stride + g.stride) % g.stride;
    if (x0 >= g.w) continue;
    const int64_t count = (g.w - x0 + g.stride - 1) / g.stride;
    fn(b, (x0 + g.pad) / g.stride, x0, count);
  }
}

// input [N,C,H,W] -> per-channel phase planes
inline void to_phases(const float* x, float* q, const ConvGeom& g, int64_t c) {
  float* qc = q + c * g.chan_len;
  std::fill(qc, qc + g.chan_len, 0.0f);
  for (int64_t n = 0; n < g.n; ++n) {
    const float* plane = x + (n * g.c + c) * g.h * g.w;
    for (int64_t y = 0; y < g.h; ++y) {
      const int64_t py = y + g.pad;
      const float* src = plane + y * g.w;
      float* row = qc + (py % g.stride) * g.stride * g.phase_len + n * g.qplane + (py / g.stride) * g.qw;
      for_row_phases(g, [&](int64_t b, int64_t j0, int64_t x0, int64_t count) {
        float* dst = row + b * g.phase_len + j0;
        if (g.stride == 1) {
          std::copy_n(src + x0, count, dst);
        } else {
          for (int64_t t = 0; t < count; ++t) dst[t] = src[x0 + t * g.stride];
        }
      });
    }
  }
}

inline void add_from_phases(const float* qc, float* gin, const ConvGeom& g, int64_t c) {
  for (int64_t n = 0; n < g.n; ++n) {
    float* plane = gin + (n * g.c + c) * g.h * g.w;
    for (int64_t y = 0; y < g.h; ++y) {
      const int64_t py = y + g.pad;
      float* dst = plane + y * g.w;
      const float* row =
          qc + (py % g.stride) * g.stride * g.phase_len + n * g.qplane + (py / g.stride) * g.qw;
      for_row_phases(g, [&](int64_t b, int64_t j0, int64_t x0, int64_t count) {
        const float* src = row + b * g.phase_len + j0;
        for (int64_t t = 0; t < count; ++t) dst[x0 + t * g.stride] += src[t];
      });
    }
  }
}

// output [N,O,oh,ow] <-> per-channel span (sample stride qplane, row stride qw)
inline void to_span(const float* y, float* span, const ConvGeom& g, int64_t o) {
  std::fill(span, span + g.span, 0.0f);
  for (int64_t n = 0; n < g.n; ++n) {
    const float* plane = y + (n * g.o + o) * g.oh * g.ow;
    for (int64_t r = 0; r < g.oh; ++r) std::copy_n(plane + r * g.ow, g.ow, span + n * g.qplane + r * g.qw);
  }
}

inline void from_span(const float* span, float* y, const ConvGeom& g, int64_t o) {
  for (int64_t n = 0; n < g.n; ++n) {
    float* plane = y + (n * g.o + o) * g.oh * g.ow;
    for (int64_t r = 0; r < g.oh; ++r) std::copy_n(span + n * g.qplane + r * g.qw, g.ow, plane + r * g.ow);
  }
}

// [N,C,P] <-> [C,N*P]
inline void to_channel_major(const float* x, float* xt, int64_t n, int64_t c, int64_t p) {
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) std::copy_n(x + (b * c + ch) * p, p, xt + (ch * n + b) * p);
  }
}

inline void add_from_channel_major(const float* xt, float* x, int64_t n, int64_t c, int64_t p) {
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      float* dst = x + (b * c + ch) * p;
      const float* src = xt + (ch * n + b) * p;
      for (int64_t i = 0; i < p; ++i) dst[i] += src[i];
    }
  }
}

// Span tile small enough that an accumulator slice stays in L1 while every
// tap or input channel is applied to it.
inline constexpr int64_t kTile = 1024;

// dst[o] = sum_c w[o, c] * src[c] for one group, rows of length len
inline void mix_rows(float* dst, const float* src, const float* w, int64_t w_col_stride, int64_t cin,
                     int64_t len) {
  for (int64_t t0 = 0; t0 < len; t0 += kTile) {
    const int64_t m = std::min(kTile, len - t0);
    float* d = dst + t0;
    const float* sb = src + t0;
    std::fill(d, d + m, 0.0f);
    int64_t c = 0;
    for (; c + 4 <= cin; c += 4) {
      const float a[4] = {w[c * w_col_stride], w[(c + 1) * w_col_stride], w[(c + 2) * w_col_stride],
                          w[(c + 3) * w_col_stride]};
      axpy4(d, sb + c * len, sb + (c + 1) * len, sb + (c + 2) * len, sb + (c + 3) * len, a, m);
    }
    for (; c < cin; ++c) axpy(d, sb + c * len, w[c * w_col_stride], m);
  }
}

}  // namespace detail

inline int64_t conv_out_extent(int64_t in, int64_t k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

/// Grouped 2-D convolution without bias. input [N,C,H,W], weight [O,C/groups,K,K].
/// Pointwise convs use K=1; depthwise convs use groups=C.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding,
                     int groups) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  detail::ConvGeom g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  g.groups = groups;
  if (groups < 1 || g.c % groups != 0 || g.o % groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide input channels " +
                      std::to_string(g.c) + " and output channels " + std::to_string(g.o));
  }
  g.cpg = g.c / groups;
  g.opg = g.o / groups;
  if (weight.dim(1) != g.cpg || weight.dim(3) != g.k) {
    throw ConfigError("conv2d: weight shape " + shape_str(weight.shape()) +
                      " incompatible with input " + shape_str(input.shape()) + " and groups " +
                      std::to_string(groups));
  }
  if (g.k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(g.k));
  if (stride != 1 && stride != 2) {
    throw ConfigError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (padding < 0) throw ConfigError("conv2d: negative padding");
  g.oh = conv_out_extent(g.h, g.k, stride, padding);
  g.ow = conv_out_extent(g.w, g.k, stride, padding);
  if (g.oh <= 0 || g.ow <= 0) {
    throw ConfigError("conv2d: empty output for input " + shape_str(input.shape()) + " kernel " +
                      std::to_string(g.k));
  }
  g.qw = (g.w + 2 * padding + stride - 1) / stride;
  g.qh = (g.h + 2 * padding + stride - 1) / stride + 1;
  g.qplane = g.qh * g.qw;
  g.span = g.n * g.qplane;
  g.phase_len = g.span + g.qplane;  // one plane of slack for the largest tap offset
  g.chan_len = static_cast<int64_t>(stride) * stride * g.phase_len;

  const bool pointwise = g.k == 1 && stride == 1 && padding == 0;
  const int64_t plane = pointwise ? g.h * g.w : 0;
  const int64_t kk = g.k * g.k;
  std::vector<float> out(static_cast<size_t>(g.n * g.o * g.oh * g.ow), 0.0f);
  {
    const float* x = input.data().data();
    const float* wt = weight.data().data();
    if (pointwise) {
      const int64_t len = g.n * plane;
      std::vector<float> xt(static_cast<size_t>(g.c * len)), yt(static_cast<size_t>(g.o * len));
      detail::to_channel_major(x, xt.data(), g.n, g.c, plane);
      parallel_for(0, g.o, [&](int64_t o) {
        const int64_t grp = o / g.opg;
        detail::mix_rows(yt.data() + o * len, xt.data() + grp * g.cpg * len, wt + o * g.cpg, 1, g.cpg, len);
      });
      detail::add_from_channel_major(yt.data(), out.data(), g.n, g.o, plane);
    } else {
      std::vector<float> q(static_cast<size_t>(g.c * g.chan_len));
      parallel_for(0, g.c, [&](int64_t c) { detail::to_phases(x, q.data(), g, c); });
      float* y = out.data();
      parallel_for(0, g.o, [&](int64_t o) {
        const int64_t grp = o / g.opg;
        std::vector<float> acc(static_cast<size_t>(g.span), 0.0f);
        std::vector<const float*> srcs(static_cast<size_t>(kk));
        for (int64_t t0 = 0; t0 < g.span; t0 += detail::kTile) {
          const int64_t m = std::min(detail::kTile, g.span - t0);
          for (int64_t ci = 0; ci < g.cpg; ++ci) {
            const float* qc = q.data() + (grp * g.cpg + ci) * g.chan_len + t0;
            for (int64_t kh = 0; kh < g.k; ++kh) {
              for (int64_t kw = 0; kw < g.k; ++kw) srcs[kh * g.k + kw] = g.tap(qc, kh, kw);
            }
            detail::axpy_many(acc.data() + t0, srcs.data(), wt + (o * g.cpg + ci) * kk, kk, m);
          }
        }
        detail::from_span(acc.data(), y, g, o);
      });
    }
  }

  return make_result(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), {input, weight}, "conv2d",
      [g, kk, pointwise, plane](Node& self) {
        Node& xin = *self.inputs[0];
        Node& win = *self.inputs[1];
        const bool need_x = xin.requires_grad;
        const bool need_w = win.requires_grad;
        if (!need_x && !need_w) return;
        const float* gout = self.grad.data();
        const float* x = xin.data.data();
        const float* wt = win.data.data();
        // Every gradient element is reduced by a single thread in a fixed
        // order, so results do not depend on the thread count.
        if (pointwise) {
          const int64_t len = g.n * plane;
          std::vector<float> gyt(static_cast<size_t>(g.o * len));
          detail::to_channel_major(gout, gyt.data(), g.n, g.o, plane);
          if (need_w) {
            std::vector<float> xt(static_cast<size_t>(g.c * len));
            detail::to_channel_major(x, xt.data(), g.n, g.c, plane);
            float* gw = win.grad.data();
            parallel_for(0, g.o, [&](int64_t o) {
              const int64_t grp = o / g.opg;
              for (int64_t ci = 0; ci < g.cpg; ++ci) {
                gw[o * g.cpg + ci] += detail::dot(gyt.data() + o * len, xt.data() + (grp * g.cpg + ci) * len, len);
              }
            });
          }
          if (need_x) {
            std::vector<float> gxt(static_cast<size_t>(g.c * len));
            parallel_for(0, g.c, [&](int64_t c) {
              const int64_t grp = c / g.cpg;
              const int64_t ci = c % g.cpg;
              detail::mix_rows(gxt.data() + c * len, gyt.data() + grp * g.opg * len,
                               wt + grp * g.opg * g.cpg + ci, g.cpg, g.opg, len);
            });
            detail::add_from_channel_major(gxt.data(), xin.grad.data(), g.n, g.c, plane);
          }
          return;
        }
        std::vector<float> gspan(static_cast<size_t>(g.o * g.span));
        parallel_for(0, g.o, [&](int64_t o) { detail::to_span(gout, gspan.data() + o * g.span, g, o); });
        if (need_w) {
          std::vector<float> q(static_cast<size_t>(g.c * g.chan_len));
          parallel_for(0, g.c, [&](int64_t c) { detail::to_phases(x, q.data(), g, c); });
          float* gw = win.grad.data();
          parallel_for(0, g.o, [&](int64_t o) {
            const int64_t grp = o / g.opg;
            const float* gs = gspan.data() + o * g.span;
            for (int64_t ci = 0; ci < g.cpg; ++ci) {
              const float* qc = q.data() + (grp * g.cpg + ci) * g.chan_len;
              float* grow = gw + (o * g.cpg + ci) * kk;
              for (int64_t kh = 0; kh < g.k; ++kh) {
                for (int64_t kw = 0; kw < g.k; ++kw) {
                  grow[kh * g.k + kw] += detail::dot(gs, g.tap(qc, kh, kw), g.span);
                }
              }
            }
          });
        }
        if (need_x) {
          float* gin = xin.grad.data();
          parallel_for(0, g.c, [&](int64_t c) {
            const int64_t grp = c / g.cpg;
            const int64_t ci = c % g.cpg;
            std::vector<float> gq(static_cast<size_t>(g.chan_len), 0.0f);
            for (int64_t t0 = 0; t0 < g.span; t0 += detail::kTile) {
              const int64_t m = std::min(detail::kTile, g.span - t0);
              for (int64_t oo = 0; oo < g.opg; ++oo) {
                const int64_t o = grp * g.opg + oo;
                const float* gs = gspan.data() + o * g.span + t0;
                const float* wrow = wt + (o * g.cpg + ci) * kk;
                for (int64_t kh = 0; kh < g.k; ++kh) {
                  for (int64_t kw = 0; kw < g.k; ++kw) {
                    detail::axpy(g.tap(gq.data() + t0, kh, kw), gs, wrow[kh * g.k + kw], m);
                  }
                }
              }
            }
            detail::add_from_phases(gq.data(), gin, g, c);
          });
        }
      });
}

/// Elementwise max(0, x); the subgradient at 0 is 0.
inline Tensor relu(const Tensor& input) {
  const auto x = input.data();
  std::vector<float> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return make_result(input.shape(), std::move(out), {input}, "relu", [](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    float* __restrict gi = in.grad.data();
    const float* __restrict xv = in.data.data();
    const float* __restrict go = self.grad.data();
    const int64_t n = static_cast<int64_t>(in.data.size());
    for (int64_t i = 0; i < n; ++i) gi[i] += xv[i] > 0.0f ? go[i] : 0.0f;
  });
}

enum class BnMode {
  train,         // batch statistics, running stats updated
  train_frozen,  // batch statistics, running stats untouched
  eval,          // running statistics
};

struct BnStats {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  BnStats() = default;
  explicit BnStats(int64_t channels)
      : running_mean(static_cast<size_t>(channels), 0.0f),
        running_var(static_cast<size_t>(channels), 1.0f) {}
};

/// Per-channel batch normalization over N,H,W.
inline Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         BnStats& stats, BnMode mode) {
  detail::require_rank(input, 4, "batch_norm", "input");
  const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.numel() != c || beta.numel() != c ||
      static_cast<int64_t>(stats.running_mean.size()) != c) {
    throw ConfigError("batch_norm: parameter length does not match channels " + std::to_string(c));
  }
  const bool batch_stats = mode != BnMode::eval;
  const int64_t count = n * hw;
  if (batch_stats && count < 2) {
    throw ConfigError("batch_norm: training mode needs N*H*W >= 2, got " + std::to_string(count));
  }
  const auto x = input.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  std::vector<float> out(x.size());
  std::vector<float> xhat(x.size());
  std::vector<float> inv_std(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    if (batch_stats) {
      for (int64_t b = 0; b < n; ++b) mean += detail::sum_d(x.data() + (b * c + ch) * hw, hw);
      mean /= static_cast<double>(count);
      for (int64_t b = 0; b < n; ++b) var += detail::sq_dev_d(x.data() + (b * c + ch) * hw, mean, hw);
      var /= static_cast<double>(count);
      if (mode == BnMode::train) {
        const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
        stats.running_mean[ch] = static_cast<float>((1.0 - stats.momentum) * stats.running_mean[ch] +
                                                    stats.momentum * mean);
        stats.running_var[ch] = static_cast<float>((1.0 - stats.momentum) * stats.running_var[ch] +
                                                   stats.momentum * unbiased);
      }
    } else {
      mean = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + stats.eps);
    inv_std[ch] = static_cast<float>(istd);
    const float meanf = static_cast<float>(mean), istdf = static_cast<float>(istd);
    const float g = gm[ch], bb = bt[ch];
    for (int64_t b = 0; b < n; ++b) {
      const int64_t base = (b * c + ch) * hw;
      const float* __restrict xp = x.data() + base;
      float* __restrict xh = xhat.data() + base;
      float* __restrict op = out.data() + base;
      for (int64_t i = 0; i < hw; ++i) {
        xh[i] = (xp[i] - meanf) * istdf;
        op[i] = g * xh[i] + bb;
      }
    }
  }
  return make_result(
      input.shape(), std::move(out), {input, gamma, beta}, "batch_norm",
      [n, c, hw, count, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Node& self) {
        Node& in = *self.inputs[0];
        Node& gam = *self.inputs[1];
        Node& bet = *self.inputs[2];
        const float* dy = self.grad.data();
        for (int64_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int64_t b = 0; b < n; ++b) {
            const int64_t base = (b * c + ch) * hw;
            sum_dy += detail::sum_d(dy + base, hw);
            sum_dy_xhat += detail::dot_d(dy + base, xhat.data() + base, hw);
          }
          if (gam.requires_grad) gam.grad[ch] += static_cast<float>(sum_dy_xhat);
          if (bet.requires_grad) bet.grad[ch] += static_cast<float>(sum_dy);
          if (!in.requires_grad) continue;
          const float scale = gam.data[ch] * inv_std[ch];
          const float mean_dy = batch_stats ? static_cast<float>(sum_dy / static_cast<double>(count)) : 0.0f;
          const float mean_dy_xhat =
              batch_stats ? static_cast<float>(sum_dy_xhat / static_cast<double>(count)) : 0.0f;
          for (int64_t b = 0; b < n; ++b) {
            const int64_t base = (b * c + ch) * hw;
            const float* __restrict d = dy + base;
            const float* __restrict xh = xhat.data() + base;
            float* __restrict gi = in.grad.data() + base;
            for (int64_t i = 0; i < hw; ++i) gi[i] += scale * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
          }
        }
      });
}

/// Output channel j reads input channel (j % groups) * (C / groups) + j / groups,
/// i.e. a [groups, C/groups] channel grid is transposed.
inline std::vector<int64_t> shuffle_permutation(int64_t channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("channel_shuffle: groups=" + std::to_string(groups) +
                      " does not divide channels " + std::to_string(channels));
  }
  const int64_t per = channels / groups;
  std::vector<int64_t> src(static_cast<size_t>(channels));
  for (int64_t j = 0; j < channels; ++j) src[j] = (j % groups) * per + j / groups;
  return src;
}

inline Tensor permute_channels(const Tensor& input, const std::vector<int64_t>& src,
                               const char* op) {
  detail::require_rank(input, 4, op, "input");
  const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (static_cast<int64_t>(src.size()) != c) throw ConfigError(std::string(op) + ": permutation length mismatch");
  const auto x = input.data();
  std::vector<float> out(x.size());
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t j = 0; j < c; ++j) {
      std::copy_n(x.data() + (b * c + src[j]) * hw, hw, out.data() + (b * c + j) * hw);
    }
  }
  return make_result(input.shape(), std::move(out), {input}, op, [n, c, hw, src](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t j = 0; j < c; ++j) {
        float* dst = in.grad.data() + (b * c + src[j]) * hw;
        const float* g = self.grad.data() + (b * c + j) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += g[i];
      }
    }
  });
}

inline Tensor channel_shuffle(const Tensor& input, int groups) {
  detail::require_rank(input, 4, "channel_shuffle", "input");
  if (groups == 1) {
    shuffle_permutation(input.dim(1), 1);
    return input;
  }
  return permute_channels(input, shuffle_permutation(input.dim(1), groups), "channel_shuffle");
}

/// Inverse of channel_shuffle with the same group count.
inline Tensor channel_unshuffle(const Tensor& input, int groups) {
  detail::require_rank(input, 4, "channel_unshuffle", "input");
  const auto fwd = shuffle_permutation(input.dim(1), groups);
  std::vector<int64_t> inv(fwd.size());
  for (size_t j = 0; j < fwd.size(); ++j) inv[static_cast<size_t>(fwd[j])] = static_cast<int64_t>(j);
  return permute_channels(input, inv, "channel_unshuffle");
}

/// Mean over H and W: [N,C,H,W] -> [N,C,1,1].
inline Tensor avg_pool_global(const Tensor& input) {
  detail::require_rank(input, 4, "avg_pool_global", "input");
  const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (hw < 1) throw ConfigError("avg_pool_global: empty spatial extent");
  const auto x = input.data();
  std::vector<float> out(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < hw; ++j) s += x[i * hw + j];
    out[i] = static_cast<float>(s / static_cast<double>(hw));
  }
  return make_result(Shape{n, c, 1, 1}, std::move(out), {input}, "avg_pool_global",
                     [n, c, hw](Node& self) {
                       Node& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       const float inv = 1.0f / static_cast<float>(hw);
                       for (int64_t i = 0; i < n * c; ++i) {
                         const float g = self.grad[i] * inv;
                         for (int64_t j = 0; j < hw; ++j) in.grad[i * hw + j] += g;
                       }
                     });
}

/// [N, ...] -> [N, prod(...)]
inline Tensor flatten(const Tensor& input) {
  const int64_t n = input.dim(0);
  const int64_t d = n == 0 ? 0 : input.numel() / n;
  return make_result(Shape{n, d}, input.values(), {input}, "flatten", [](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    for (size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

/// input [N,D] x weight [D,M] + bias [M].
inline Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "fully_connected", "input");
  detail::require_rank(weight, 2, "fully_connected", "weight");
  const int64_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d || bias.numel() != m) {
    throw ConfigError("fully_connected: input " + shape_str(input.shape()) + ", weight " +
                      shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()) +
                      " are incompatible");
  }
  const auto x = input.data();
  const auto w = weight.data();
  const auto b = bias.data();
  std::vector<float> out(static_cast<size_t>(n * m));
  for (int64_t r = 0; r < n; ++r) {
    float* y = out.data() + r * m;
    for (int64_t j = 0; j < m; ++j) y[j] = b[j];
    for (int64_t k = 0; k < d; ++k) {
      const float xv = x[r * d + k];
      const float* wrow = w.data() + k * m;
      for (int64_t j = 0; j < m; ++j) y[j] += xv * wrow[j];
    }
  }
  return make_result(
      Shape{n, m}, std::move(out), {input, weight, bias}, "fully_connected",
      [n, d, m](Node& self) {
        Node& in = *self.inputs[0];
        Node& wt = *self.inputs[1];
        Node& bs = *self.inputs[2];
        const float* gy = self.grad.data();
        if (in.requires_grad) {
          for (int64_t r = 0; r < n; ++r) {
            for (int64_t k = 0; k < d; ++k) {
              const float* wrow = wt.data.data() + k * m;
              float acc = 0.0f;
              for (int64_t j = 0; j < m; ++j) acc += gy[r * m + j] * wrow[j];
              in.grad[r * d + k] += acc;
            }
          }
        }
        if (wt.requires_grad) {
          for (int64_t r = 0; r < n; ++r) {
            for (int64_t k = 0; k < d; ++k) {
              const float xv = in.data[r * d + k];
              float* grow = wt.grad.data() + k * m;
              for (int64_t j = 0; j < m; ++j) grow[j] += xv * gy[r * m + j];
            }
          }
        }
        if (bs.requires_grad) {
          for (int64_t r = 0; r < n; ++r) {
            for (int64_t j = 0; j < m; ++j) bs.grad[j] += gy[r * m + j];
          }
        }
      });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy", "logits");
  const int64_t n = logits.dim(0), m = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  if (n == 0) throw InputError("cross_entropy: empty batch");
  for (int64_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || labels[r] >= m) {
      throw InputError("cross_entropy: label " + std::to_string(labels[r]) + " at index " +
                       std::to_string(r) + " outside [0," + std::to_string(m) + ")");
    }
  }
  const auto z = logits.data();
  std::vector<float> probs(static_cast<size_t>(n * m));
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const float* row = z.data() + r * m;
    const float mx = *std::max_element(row, row + m);
    double denom = 0.0;
    for (int64_t j = 0; j < m; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom);
    for (int64_t j = 0; j < m; ++j) {
      probs[r * m + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx - log_denom));
    }
    total += -(static_cast<double>(row[labels[r]]) - mx - log_denom);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Shape{1}, {static_cast<float>(total / static_cast<double>(n))}, {logits},
                     "cross_entropy",
                     [n, m, probs = std::move(probs), lab = std::move(lab)](Node& self) {
                       Node& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       const float g = self.grad[0] / static_cast<float>(n);
                       for (int64_t r = 0; r < n; ++r) {
                         for (int64_t j = 0; j < m; ++j) {
                           const float onehot = j == lab[r] ? 1.0f : 0.0f;
                           in.grad[r * m + j] += g * (probs[r * m + j] - onehot);
                         }
                       }
                     });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<float> out(a.values());
  detail::add_to(out.data(), b.data().data(), a.numel());
  return make_result(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      detail::add_to(in->grad.data(), self.grad.data(), static_cast<int64_t>(in->grad.size()));
    }
  });
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<float> out(a.values());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      for (size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      for (size_t i = 0; i < y.grad.size(); ++i) y.grad[i] += self.grad[i] * x.data[i];
    }
  });
}

inline Tensor sum(const Tensor& input) {
  const double s = detail::sum_d(input.data().data(), input.numel());
  return make_result(Shape{1}, {static_cast<float>(s)}, {input}, "sum", [](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const float g = self.grad[0];
    float* gi = in.grad.data();
    const int64_t n = static_cast<int64_t>(in.grad.size());
    for (int64_t i = 0; i < n; ++i) gi[i] += g;
  });
}

/// Σ_i weights[i] * inputs[i]; weights is a 1-D tensor with one entry per input.
/// The reduction runs in input order.
inline Tensor weighted_sum(const std::vector<Tensor>& inputs, const Tensor& weights) {
  if (inputs.empty()) throw ConfigError("weighted_sum: no inputs");
  if (weights.numel() != static_cast<int64_t>(inputs.size())) {
    throw ConfigError("weighted_sum: " + std::to_string(weights.numel()) + " weights for " +
                      std::to_string(inputs.size()) + " inputs");
  }
  const Shape& shape = inputs.front().shape();
  for (const auto& t : inputs) {
    if (t.shape() != shape) {
      throw ConfigError("weighted_sum: shape mismatch " + shape_str(t.shape()) + " vs " +
                        shape_str(shape));
    }
  }
  const auto w = weights.data();
  std::vector<float> out(static_cast<size_t>(shape_numel(shape)), 0.0f);
  const int64_t len = static_cast<int64_t>(out.size());
  for (size_t i = 0; i < inputs.size(); ++i) detail::axpy(out.data(), inputs[i].data().data(), w[i], len);
  std::vector<Tensor> all(inputs);
  all.push_back(weights);
  const size_t k = inputs.size();
  return make_result(shape, std::move(out), std::move(all), "weighted_sum", [k](Node& self) {
    Node& wn = *self.inputs[k];
    for (size_t i = 0; i < k; ++i) {
      Node& in = *self.inputs[i];
      const int64_t len = static_cast<int64_t>(in.data.size());
      if (in.requires_grad) detail::axpy(in.grad.data(), self.grad.data(), wn.data[i], len);
      if (wn.requires_grad) {
        wn.grad[i] += static_cast<float>(detail::dot_d(self.grad.data(), in.data.data(), len));
      }
    }
  });
}

/// Inverted dropout; identity when not training or p == 0.
template <typename Rng>
Tensor dropout(const Tensor& input, float p, Rng& rng, bool training) {
  if (!training || p <= 0.0f) return input;
  if (p >= 1.0f) throw ConfigError("dropout: probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const float scale = 1.0f / (1.0f - p);
  std::vector<float> mask(static_cast<size_t>(input.numel()));
  for (auto& v : mask) v = keep(rng) ? scale : 0.0f;
  const auto x = input.data();
  std::vector<float> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return make_result(input.shape(), std::move(out), {input}, "dropout",
                     [mask = std::move(mask)](Node& self) {
                       Node& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       for (size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i] * mask[i];
                     });
}

}  // namespace dnas
