#include <gtest/gtest.h>

#include <cmath>

#include "dnas/gradcheck.hpp"
#include "dnas/ops.hpp"
#include "dnas/parallel.hpp"
#include "support.hpp"

using namespace dnas;
using dnas::testing::random_tensor;

namespace {

// Direct 7-loop convolution used as the reference for the fast kernels.
std::vector<float> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad, int groups) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t o = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  const int64_t oh = conv_out_extent(h, k, stride, pad), ow = conv_out_extent(wd, k, stride, pad);
  const int64_t opg = o / groups;
  std::vector<float> y(static_cast<size_t>(n * o * oh * ow), 0.0f);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < o; ++oc)
      for (int64_t yy = 0; yy < oh; ++yy)
        for (int64_t xx = 0; xx < ow; ++xx) {
          double acc = 0.0;
          const int64_t g = oc / opg;
          for (int64_t ci = 0; ci < cpg; ++ci)
            for (int64_t kh = 0; kh < k; ++kh)
              for (int64_t kw = 0; kw < k; ++kw) {
                const int64_t iy = yy * stride - pad + kh, ix = xx * stride - pad + kw;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.data()[((b * c + g * cpg + ci) * h + iy) * wd + ix]) *
                       w.data()[((oc * cpg + ci) * k + kh) * k + kw];
              }
          y[static_cast<size_t>(((b * o + oc) * oh + yy) * ow + xx)] = static_cast<float>(acc);
        }
  return y;
}

struct ConvCase {
  int64_t n, c, hw, o, k;
  int stride, groups;
};

}  // namespace

TEST(Tensor, ConstructionAndShapeChecks) {
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FLOAT_EQ(t.data()[5], 1.5f);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ConfigError);
  EXPECT_THROW(t.item(), ConfigError);
  EXPECT_FLOAT_EQ(Tensor::scalar(4.0f).item(), 4.0f);
}

TEST(Tensor, BackwardAccumulatesThroughSharedInputs) {
  Tensor a({3}, std::vector<float>{1, -2, 3}, true);
  Tensor y = sum(add(mul(a, a), a));  // d/da = 2a + 1
  y.backward();
  EXPECT_FLOAT_EQ(a.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(a.grad()[1], -3.0f);
  EXPECT_FLOAT_EQ(a.grad()[2], 7.0f);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor a({2}, 1.0f, true);
  {
    NoGradGuard guard;
    Tensor y = sum(mul(a, a));
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(y.backward(), ConfigError);
  }
  EXPECT_TRUE(sum(a).requires_grad());
}

TEST(Tensor, BackwardRequiresScalar) {
  Tensor a({2}, 1.0f, true);
  EXPECT_THROW(mul(a, a).backward(), ConfigError);
}

TEST(Tensor, CheckFiniteReportsIndex) {
  Tensor t({3}, std::vector<float>{0.0f, NAN, 1.0f});
  try {
    check_finite(t, "probe");
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
}

class ConvAgainstReference : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvAgainstReference, ForwardMatches) {
  const auto p = GetParam();
  Rng rng(11);
  Tensor x = random_tensor({p.n, p.c, p.hw, p.hw}, rng);
  Tensor w = random_tensor({p.o, p.c / p.groups, p.k, p.k}, rng, 0.3);
  const int pad = static_cast<int>(p.k / 2);
  Tensor y = conv2d(x, w, p.stride, pad, p.groups);
  const auto ref = naive_conv(x, w, p.stride, pad, p.groups);
  ASSERT_EQ(static_cast<size_t>(y.numel()), ref.size());
  for (size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-4) << "at " << i;
}

TEST_P(ConvAgainstReference, GradientsMatchFiniteDifferences) {
  const auto p = GetParam();
  Rng rng(12);
  Tensor x = random_tensor({p.n, p.c, p.hw, p.hw}, rng);
  Tensor w = random_tensor({p.o, p.c / p.groups, p.k, p.k}, rng, 0.3);
  const int pad = static_cast<int>(p.k / 2);
  auto r = grad_check([&] { return conv2d(x, w, p.stride, pad, p.groups); }, {x, w}, 1e-2, 40, rng);
  EXPECT_LE(r.max_rel_err, 1e-3) << "tensor " << r.worst_tensor;
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvAgainstReference,
                         ::testing::Values(ConvCase{2, 4, 6, 6, 1, 1, 1},   // pointwise
                                           ConvCase{2, 4, 6, 8, 1, 1, 2},   // grouped pointwise
                                           ConvCase{2, 3, 7, 5, 3, 1, 1},   // dense 3x3, odd size
                                           ConvCase{2, 4, 8, 4, 3, 2, 4},   // depthwise stride 2
                                           ConvCase{1, 6, 9, 6, 5, 2, 6},   // depthwise 5x5 stride 2
                                           ConvCase{3, 4, 5, 4, 5, 1, 2},   // grouped 5x5
                                           ConvCase{2, 3, 8, 4, 3, 2, 1},   // dense stride 2
                                           ConvCase{2, 4, 4, 8, 1, 2, 1}),  // strided pointwise
                         [](const ::testing::TestParamInfo<ConvCase>& info) {
                           const ConvCase& p = info.param;
                           return "n" + std::to_string(p.n) + "c" + std::to_string(p.c) + "hw" + std::to_string(p.hw) +
                                  "o" + std::to_string(p.o) + "k" + std::to_string(p.k) + "s" +
                                  std::to_string(p.stride) + "g" + std::to_string(p.groups);
                         });

TEST(Conv, ResultsDoNotDependOnThreadCount) {
  Rng rng(3);
  Tensor x = random_tensor({4, 8, 8, 8}, rng);
  Tensor w = random_tensor({8, 1, 3, 3}, rng);
  auto run = [&](int threads) {
    set_num_threads(threads);
    Tensor xx = x.clone(true), ww = w.clone(true);
    Tensor y = conv2d(xx, ww, 1, 1, 8);
    sum(mul(y, y)).backward();
    std::vector<float> all(y.values());
    all.insert(all.end(), xx.grad().begin(), xx.grad().end());
    all.insert(all.end(), ww.grad().begin(), ww.grad().end());
    return all;
  };
  const auto one = run(1);
  const auto four = run(4);
  set_num_threads(1);
  EXPECT_EQ(one, four);
}

TEST(Conv, RejectsBadShapes) {
  Tensor x({1, 4, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor({4, 3, 3, 3}), 1, 1, 1), ConfigError);  // channel mismatch
  EXPECT_THROW(conv2d(x, Tensor({4, 2, 3, 3}), 1, 1, 3), ConfigError);  // groups do not divide
  EXPECT_THROW(conv2d(Tensor({4, 4}), Tensor({4, 4, 1, 1}), 1, 0, 1), ConfigError);
}

TEST(Ops, ElementwiseAndReductionGradients) {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  EXPECT_LE(grad_check([&] { return mul(a, b); }, {a, b}, 1e-2, 20, rng).max_rel_err, 1e-3);
  EXPECT_LE(grad_check([&] { return add(a, b); }, {a, b}, 1e-2, 20, rng).max_rel_err, 1e-3);
  EXPECT_LE(grad_check([&] { return sum(a); }, {a}, 1e-2, 20, rng).max_rel_err, 1e-3);
}

TEST(Ops, ReluGradientAwayFromKink) {
  Rng rng(6);
  Tensor a = random_tensor({50}, rng);
  for (auto& v : a.data()) v += v > 0 ? 0.1f : -0.1f;
  EXPECT_LE(grad_check([&] { return relu(a); }, {a}, 1e-2, 50, rng).max_rel_err, 1e-3);
}

TEST(Ops, BatchNormTrainGradient) {
  Rng rng(7);
  Tensor x = random_tensor({4, 3, 3, 3}, rng);
  Tensor g = random_tensor({3}, rng);
  Tensor b = random_tensor({3}, rng);
  BnStats stats(3);
  auto r = grad_check([&] { return batch_norm(x, g, b, stats, BnMode::train_frozen); }, {x, g, b}, 1e-2,
                      40, rng);
  EXPECT_LE(r.max_rel_err, 1e-3) << "tensor " << r.worst_tensor;
}

TEST(Ops, BatchNormModes) {
  Rng rng(8);
  Tensor x = random_tensor({8, 2, 4, 4}, rng, 3.0);
  for (auto& v : x.data()) v += 5.0f;
  Tensor g = Tensor::ones({2}), b = Tensor::zeros({2});
  BnStats stats(2);
  Tensor y = batch_norm(x, g, b, stats, BnMode::train);
  double mean = 0.0, var = 0.0;
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t p = 0; p < 16; ++p) mean += y.data()[(i * 2) * 16 + p];
  mean /= 128.0;
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t p = 0; p < 16; ++p) var += std::pow(y.data()[(i * 2) * 16 + p] - mean, 2);
  EXPECT_NEAR(mean, 0.0, 1e-5);
  EXPECT_NEAR(var / 128.0, 1.0, 1e-3);
  EXPECT_GT(stats.running_mean[0], 0.0f);  // moved towards the batch mean

  BnStats frozen(2);
  batch_norm(x, g, b, frozen, BnMode::train_frozen);
  EXPECT_EQ(frozen.running_mean, std::vector<float>(2, 0.0f));

  // eval with default stats is the identity (up to epsilon)
  Tensor e = batch_norm(x, g, b, frozen, BnMode::eval);
  EXPECT_NEAR(e.data()[0], x.data()[0], 1e-3);
}

TEST(Ops, PoolingShuffleAndFullyConnectedGradients) {
  Rng rng(9);
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  EXPECT_LE(grad_check([&] { return avg_pool_global(x); }, {x}, 1e-2, 30, rng).max_rel_err, 1e-3);
  EXPECT_LE(grad_check([&] { return channel_shuffle(x, 2); }, {x}, 1e-2, 30, rng).max_rel_err, 1e-3);
  Tensor in = random_tensor({3, 5}, rng);
  Tensor w = random_tensor({5, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  auto r = grad_check([&] { return fully_connected(in, w, bias); }, {in, w, bias}, 1e-2, 30, rng);
  EXPECT_LE(r.max_rel_err, 1e-3);
}

TEST(Ops, ChannelShuffleRoundTrip) {
  Rng rng(10);
  Tensor x = random_tensor({1, 6, 2, 2}, rng);
  Tensor y = channel_unshuffle(channel_shuffle(x, 2), 2);
  EXPECT_EQ(y.values(), x.values());
  EXPECT_THROW(channel_shuffle(x, 4), ConfigError);
}

TEST(Ops, CrossEntropyValueAndGradient) {
  Tensor logits({2, 3}, std::vector<float>{0, 0, 0, 1, 2, 3});
  const std::vector<int> labels{0, 2};
  const double expected = (std::log(3.0) + (std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0)) / 2;
  EXPECT_NEAR(cross_entropy(logits, labels).item(), expected, 1e-6);
  Rng rng(13);
  Tensor z = random_tensor({4, 5}, rng);
  const std::vector<int> l2{0, 4, 2, 2};
  EXPECT_LE(grad_check([&] { return cross_entropy(z, l2); }, {z}, 1e-2, 20, rng).max_rel_err, 1e-3);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{0, 3}), InputError);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{0}), InputError);
}

TEST(Ops, WeightedSumGradient) {
  Rng rng(14);
  std::vector<Tensor> xs{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
  Tensor w = random_tensor({3}, rng);
  auto r = grad_check([&] { return weighted_sum(xs, w); }, {xs[0], xs[1], xs[2], w}, 1e-2, 20, rng);
  EXPECT_LE(r.max_rel_err, 1e-3);
  EXPECT_THROW(weighted_sum(xs, Tensor({2})), ConfigError);
}
