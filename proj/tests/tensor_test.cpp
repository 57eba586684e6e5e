#include <gtest/gtest.h>

#include <cmath>

#include "dermfuse/nn.hpp"
#include "dermfuse/optim.hpp"
#include "dermfuse/tensor.hpp"
#include "testutil.hpp"

using namespace dermfuse;

namespace {

template <typename T>
void expect_values(const Tensor<T>& t, const std::vector<T>& expected, double tol = 0.0) {
  ASSERT_EQ(t.numel(), static_cast<std::int64_t>(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_NEAR(static_cast<double>(t.values()[i]), static_cast<double>(expected[i]), tol) << "at " << i;
  }
}

}  // namespace

TEST(ElementwiseMul, IdentityAndAnnihilator) {
  Tensor<float> a({3}, {1, 2, 3});
  expect_values(mul(a, Tensor<float>({3}, {1, 1, 1})), {1, 2, 3});
  expect_values(mul(a, Tensor<float>({3}, {0, 0, 0})), {0, 0, 0});
}

TEST(ElementwiseMul, ShapeMismatchThrows) {
  Tensor<float> a({3});
  Tensor<float> b({2});
  EXPECT_THROW(mul(a, b), ShapeError);
}

TEST(ElementwiseMul, ProductRuleGradient) {
  Tensor<double> a({2}, {2, 3}, true);
  Tensor<double> b({2}, {4, 5}, true);
  auto loss = sum(mul(a, b));  // upstream grad of ones
  backward(loss);
  expect_values(Tensor<double>({2}, a.grad()), {4, 5});
  expect_values(Tensor<double>({2}, b.grad()), {2, 3});

  Rng rng(7);
  auto a2 = testutil::random_tensor({2, 3}, rng, -1, 1, true);
  auto b2 = testutil::random_tensor({2, 3}, rng, -1, 1, true);
  double err = testutil::max_rel_grad_error({a2, b2}, [&] { return sum(mul(a2, b2)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(Conv2d, SumOfOnesKernel) {
  Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> b({1});
  auto out = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(out.values()[0], 9.0f);
}

TEST(Conv2d, IdentityOneByOneKernel) {
  Rng rng(3);
  auto x = testutil::random_tensor({2, 1, 4, 5}, rng).cast<float>();
  Tensor<float> w({1, 1, 1, 1}, {1.0f});
  Tensor<float> b({1});
  auto out = conv2d(x, w, b, 1, 0);
  expect_values(out, x.values());
}

TEST(Conv2d, RejectsBadGeometry) {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> w3({1, 3, 3, 3});  // channel mismatch
  Tensor<float> b({1});
  EXPECT_THROW(conv2d(x, w3, b), ShapeError);
  Tensor<float> wbig({1, 2, 7, 7});  // does not fit
  EXPECT_THROW(conv2d(x, wbig, b), ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto x = testutil::random_tensor({1, 2, 4, 4}, rng, -1, 1, true);
  auto w = testutil::random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5, true);
  auto b = testutil::random_tensor({3}, rng, -0.5, 0.5, true);
  double err = testutil::max_rel_grad_error(
      {x, w, b}, [&] { return sum(conv2d(x, w, b, 1, 1)); }, rng, 1e-3, 12);
  EXPECT_LT(err, 1e-3);
}

TEST(Linear, HandCases) {
  Tensor<float> x({1, 2}, {1, 0});
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> b0({2});
  expect_values(linear(x, eye, b0), {1, 0});

  Tensor<float> x2({1, 2}, {1, 2});
  Tensor<float> w2({2, 1}, {1, 1});
  Tensor<float> b2({1}, {3});
  expect_values(linear(x2, w2, b2), {6});

  Tensor<float> wbad({3, 1});
  EXPECT_THROW(linear(x2, wbad, b2), ShapeError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  auto x = testutil::random_tensor({3, 4}, rng, -1, 1, true);
  auto w = testutil::random_tensor({4, 2}, rng, -1, 1, true);
  auto b = testutil::random_tensor({2}, rng, -1, 1, true);
  double err = testutil::max_rel_grad_error({x, w, b}, [&] { return sum(linear(x, w, b)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(Relu, ForwardAndMask) {
  Tensor<float> x({3}, {-1, 0, 2});
  expect_values(relu(x), {0, 0, 2});

  Tensor<double> neg({4}, {-3, -2, -1, -0.5}, true);
  auto loss = sum(relu(neg));
  backward(loss);
  expect_values(Tensor<double>({4}, neg.grad()), {0, 0, 0, 0});
  expect_values(relu(neg), {0, 0, 0, 0});
}

TEST(Relu, GradientAwayFromKink) {
  Rng rng(17);
  Tensor<double> x({8}, {-2.0, -1.1, -0.6, -0.2, 0.3, 0.7, 1.2, 2.5}, true);
  double err = testutil::max_rel_grad_error({x}, [&] { return sum(relu(x)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(AdaptiveAvgPool, HandCases) {
  auto c5 = Tensor<float>::full({1, 1, 4, 4}, 5.0f);
  expect_values(adaptive_avg_pool(c5, 1, 1), {5.0f});

  Tensor<float> x({1, 1, 2, 2}, {1, 3, 5, 7});
  expect_values(adaptive_avg_pool(x, 1, 1), {4.0f});
  expect_values(adaptive_avg_pool(x, 2, 2), {1, 3, 5, 7});  // same-size is identity

  EXPECT_THROW(adaptive_avg_pool(x, 3, 1), ShapeError);
}

TEST(AdaptiveAvgPool, GradientMatchesFiniteDifferences) {
  Rng rng(19);
  auto x = testutil::random_tensor({2, 2, 5, 6}, rng, -1, 1, true);
  double err =
      testutil::max_rel_grad_error({x}, [&] { return sum(adaptive_avg_pool(x, 2, 3)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(NearestUpsample, ReplicatesAndIsIdentityAtFactorOne) {
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto up = nearest_upsample(x, 2);
  expect_values(up, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  expect_values(nearest_upsample(x, 1), x.values());
  EXPECT_THROW(nearest_upsample(x, 0), ContractError);
}

TEST(NearestUpsample, GradientIsFactorSquared) {
  Tensor<double> x({1, 1, 2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, true);
  auto loss = sum(nearest_upsample(x, 3));
  backward(loss);
  for (auto g : x.grad()) EXPECT_DOUBLE_EQ(g, 9.0);

  Rng rng(23);
  auto x2 = testutil::random_tensor({1, 2, 2, 2}, rng, -1, 1, true);
  double err = testutil::max_rel_grad_error({x2}, [&] { return sum(nearest_upsample(x2, 2)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(Softmax, UniformAndClosedForm) {
  Tensor<float> z({3}, {0, 0, 0});
  expect_values(softmax(z), {1.0f / 3, 1.0f / 3, 1.0f / 3}, 1e-7);

  Tensor<float> hot({2}, {1000, 0});
  auto s = softmax(hot);
  EXPECT_FLOAT_EQ(s.values()[0], 1.0f);
  EXPECT_FLOAT_EQ(s.values()[1], 0.0f);

  Tensor<double> l({2}, {std::log(2.0), std::log(1.0)});
  auto p = softmax(l);
  EXPECT_NEAR(p.values()[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(p.values()[1], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndStayInRange) {
  Rng rng(29);
  for (int it = 0; it < 50; ++it) {
    auto z = testutil::random_tensor({4, 6}, rng, -30, 30);
    auto s = softmax(z);
    for (int r = 0; r < 4; ++r) {
      double total = 0;
      for (int j = 0; j < 6; ++j) {
        double v = s.values()[r * 6 + j];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(31);
  auto z = testutil::random_tensor({3, 5}, rng, -2, 2, true);
  auto coeff = testutil::random_tensor({3, 5}, rng);  // random projection, no grad
  double err = testutil::max_rel_grad_error({z}, [&] { return sum(mul(softmax(z), coeff)); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto loss = sum(x);
  backward(loss);
  for (auto g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SquareDerivative) {
  Tensor<double> x({1}, {3}, true);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor<double> x({2}, {1, 2}, true);
  auto y = mul(x, x);
  EXPECT_THROW(backward(y), ContractError);
  Tape<double>::get().clear();
}

TEST(Backward, SecondBackwardOnConsumedTapeRejected) {
  Tensor<double> x({2}, {1, 2}, true);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), StateError);
}

TEST(Backward, ForwardBackwardLeavesValuesUntouched) {
  Rng rng(37);
  auto x = testutil::random_tensor({2, 2, 4, 4}, rng, -1, 1, true);
  auto w = testutil::random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
  auto b = testutil::random_tensor({3}, rng, -1, 1, true);
  auto xs = x.values();
  auto ws = w.values();
  auto bs = b.values();
  auto loss = sum(relu(conv2d(x, w, b, 2, 1)));
  backward(loss);
  EXPECT_EQ(x.values(), xs);
  EXPECT_EQ(w.values(), ws);
  EXPECT_EQ(b.values(), bs);
}

TEST(Backward, NoGradSuppressesRecording) {
  Tensor<double> x({2}, {1, 2}, true);
  {
    NoGrad<double> ng;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(Tape<double>::get().empty());
}

TEST(Backward, NonFiniteForwardIsHardError) {
  Tensor<float> x({1}, {1e30f});
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(ConcatCols, ForwardAndGradient) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4}, true);
  Tensor<double> b({2, 1}, {5, 6}, true);
  auto c = concat_cols(a, b);
  expect_values(c, {1, 2, 5, 3, 4, 6});
  Rng rng(41);
  double err = testutil::max_rel_grad_error({a, b}, [&] { return sum(mul(concat_cols(a, b), concat_cols(a, b))); }, rng);
  EXPECT_LT(err, 1e-3);
}

TEST(SgdStep, PaperLearningRateCase) {
  Tensor<float> p({1}, {1.0f}, true);
  p.grad()[0] = 1.0f;
  OptimizerState st;  // base_lr 0.01
  std::vector<Tensor<float>> params{p};
  sgd_step(params, st);
  EXPECT_FLOAT_EQ(p.values()[0], 0.99f);
  EXPECT_FLOAT_EQ(p.grad()[0], 0.0f);  // zeroed afterwards
}

TEST(SgdStep, ZeroGradAndMissingGrad) {
  Tensor<float> p({2}, {1.0f, -2.0f}, true);
  OptimizerState st;
  std::vector<Tensor<float>> params{p};
  sgd_step(params, st);  // grads are zero
  EXPECT_FLOAT_EQ(p.values()[0], 1.0f);
  EXPECT_FLOAT_EQ(p.values()[1], -2.0f);

  Tensor<float> q({1}, {1.0f});  // no grad buffer
  std::vector<Tensor<float>> bad{q};
  EXPECT_THROW(sgd_step(bad, st), StateError);
}

TEST(SgdStep, DescendsOnQuadratic) {
  // f(p) = p^2, gradient 2p
  Tensor<double> p({1}, {2.0}, true);
  OptimizerState st;
  st.base_lr = 0.1;
  std::vector<Tensor<double>> params{p};
  double prev = p.values()[0] * p.values()[0];
  for (int i = 0; i < 2; ++i) {
    auto loss = sum(mul(p, p));
    backward(loss);
    sgd_step(params, st);
    double now = p.values()[0] * p.values()[0];
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(LrSchedule, StepDecayValues) {
  OptimizerState st;  // 0.01, step 15, gamma 0.1
  EXPECT_NEAR(lr_at_epoch(st, 0), 0.01, 1e-15);
  EXPECT_NEAR(lr_at_epoch(st, 14), 0.01, 1e-15);
  EXPECT_NEAR(lr_at_epoch(st, 15), 0.001, 1e-15);
  EXPECT_NEAR(lr_at_epoch(st, 32), 0.0001, 1e-15);
}

TEST(LrSchedule, NonIncreasingAndPiecewiseConstant) {
  OptimizerState st;
  double prev = lr_at_epoch(st, 0);
  for (int e = 1; e < 100; ++e) {
    double lr = lr_at_epoch(st, e);
    EXPECT_LE(lr, prev);
    if (e % st.step_size != 0) {
      EXPECT_DOUBLE_EQ(lr, lr_at_epoch(st, e - 1));
    }
    prev = lr;
  }
}

TEST(SgdStep, ZeroLearningRateIsNoop) {
  Tensor<float> p({2}, {1.5f, -0.5f}, true);
  p.grad()[0] = 3.0f;
  p.grad()[1] = -2.0f;
  OptimizerState st;
  st.base_lr = 0.0;
  std::vector<Tensor<float>> params{p};
  sgd_step(params, st);
  EXPECT_FLOAT_EQ(p.values()[0], 1.5f);
  EXPECT_FLOAT_EQ(p.values()[1], -0.5f);

  st.base_lr = -0.01;
  EXPECT_THROW(st.validate(), ConfigError);
}

TEST(Tensor, ReshapeSharesStorageAndChecksSize) {
  Tensor<float> x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = x.reshaped({3, 2});
  EXPECT_EQ(r.storage_id(), x.storage_id());
  EXPECT_THROW(x.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, ItemRequiresScalar) {
  Tensor<float> x({2}, {1, 2});
  EXPECT_THROW(x.item(), ContractError);
  EXPECT_FLOAT_EQ(Tensor<float>::scalar(4.0f).item(), 4.0f);
}
