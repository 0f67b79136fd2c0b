#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dnas/ops.hpp"
#include "dnas/optim.hpp"

using namespace dnas;

namespace {
NamedParam param(std::vector<float> v, std::vector<float> g) {
  const auto n = static_cast<int64_t>(v.size());
  Tensor t({n}, std::move(v), true);
  for (size_t i = 0; i < g.size(); ++i) t.grad()[i] = g[i];
  return {"p", t};
}
}  // namespace

TEST(Sgd, MomentumAndWeightDecayUpdate) {
  auto p = param({1.0f, -2.0f}, {0.5f, 0.25f});
  SgdMomentum opt({p}, 0.1f, 0.9f, 0.01f);
  opt.step(0.1f);
  // v = g + wd * w; w -= lr * v
  EXPECT_NEAR(p.tensor.data()[0], 1.0 - 0.1 * (0.5 + 0.01), 1e-7);
  EXPECT_NEAR(p.tensor.data()[1], -2.0 - 0.1 * (0.25 - 0.02), 1e-7);
  const float w0 = p.tensor.data()[0];
  const float v0 = opt.velocity()[0][0];
  opt.step(0.1f);  // same gradient again
  const float v1 = 0.9f * v0 + 0.5f + 0.01f * w0;
  EXPECT_NEAR(p.tensor.data()[0], w0 - 0.1f * v1, 1e-6);
}

TEST(Sgd, RejectsNonFiniteGradient) {
  auto p = param({1.0f}, {NAN});
  SgdMomentum opt({p}, 0.1f);
  EXPECT_THROW(opt.step(0.1f), NumericError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = param({1.0f, 1.0f}, {3.0f, -0.001f});
  AdamState opt({p}, 0.01f);
  opt.step();
  // bias-corrected first step is lr * sign(g)
  EXPECT_NEAR(p.tensor.data()[0], 0.99, 1e-5);
  EXPECT_NEAR(p.tensor.data()[1], 1.01, 1e-4);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, MinimizesQuadratic) {
  Tensor x({2}, std::vector<float>{3.0f, -4.0f}, true);
  AdamState opt({{"x", x}}, 0.1f);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    sum(mul(x, x)).backward();
    opt.step();
  }
  EXPECT_NEAR(x.data()[0], 0.0, 0.05);
  EXPECT_NEAR(x.data()[1], 0.0, 0.05);
}

TEST(Adam, WeightDecayEntersGradient) {
  auto p = param({2.0f}, {0.0f});
  AdamState opt({p}, 0.1f, 0.5f);
  opt.step();
  EXPECT_LT(p.tensor.data()[0], 2.0f);  // pulled towards 0 by decay alone
}

TEST(Adam, DecoupledDecayIgnoresMoments) {
  auto a = param({2.0f}, {0.0f});
  AdamState l2({a}, 0.1f, 0.5f);
  l2.step();
  // folded: gradient is wd * w, so the first step is a full lr
  EXPECT_NEAR(a.tensor.data()[0], 1.9, 1e-5);
  auto b = param({2.0f}, {0.0f});
  AdamState dec({b}, 0.1f, 0.5f);
  dec.set_decoupled(true).step();
  EXPECT_NEAR(b.tensor.data()[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-6);
}

TEST(Schedules, CosineEndpoints) {
  EXPECT_FLOAT_EQ(cosine_lr(0, 10, 0.1f), 0.1f);
  EXPECT_NEAR(cosine_lr(5, 10, 0.1f), 0.05f, 1e-7);
  EXPECT_NEAR(cosine_lr(10, 10, 0.1f), 0.0f, 1e-7);
  EXPECT_FLOAT_EQ(cosine_lr(3, 0, 0.1f), 0.1f);
}

TEST(Schedules, StepDecayQuarters) {
  EXPECT_FLOAT_EQ(step_decay_lr(0, 8, 1.0f), 1.0f);
  EXPECT_FLOAT_EQ(step_decay_lr(2, 8, 1.0f), 0.1f);
  EXPECT_NEAR(step_decay_lr(4, 8, 1.0f), 0.01f, 1e-8);
  EXPECT_NEAR(step_decay_lr(7, 8, 1.0f), 0.001f, 1e-9);
  EXPECT_FLOAT_EQ(step_decay_lr(0, 1, 1.0f), 1.0f);
}
