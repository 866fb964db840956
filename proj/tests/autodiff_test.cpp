#include <gtest/gtest.h>

#include <cmath>

#include "grad_check.hpp"
#include "pudet/autodiff.hpp"
#include "pudet/random.hpp"

namespace pudet {
namespace {

using testing::check_gradients;

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, bool grad = true) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::matrix(r, c, std::move(v), grad);
}

TEST(Matmul, IdentityAndDotProduct) {
  auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto b = Tensor::matrix(2, 2, {2, 3, 4, 5});
  auto c = matmul(id, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{2, 3, 4, 5}));

  auto row = Tensor::matrix(1, 2, {1, 2});
  auto col = Tensor::matrix(2, 1, {3, 4});
  EXPECT_DOUBLE_EQ(matmul(row, col).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  auto b = Tensor::matrix(2, 2, std::vector<double>(4, 1.0));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(3);
  auto a = random_matrix(rng, 2, 2);
  auto b = random_matrix(rng, 2, 2);
  backward(sum(matmul(a, b)));
  // d/dA sum(AB) = 1 * B^T: entry (i,p) = sum_j B[p,j]
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t p = 0; p < 2; ++p) EXPECT_DOUBLE_EQ(a.grad()[i * 2 + p], b[p * 2] + b[p * 2 + 1]);

  auto res = check_gradients([&] { return sum(matmul(a, b)); }, {&a, &b});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Elementwise, SigmoidAndClamp) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(clamp_min_zero(Tensor::scalar(-0.55)).item(), 0.0);
  EXPECT_DOUBLE_EQ(clamp_min_zero(Tensor::scalar(0.01)).item(), 0.01);

  auto x = Tensor::scalar(0.0, true);
  backward(sigmoid(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
  auto res = check_gradients([&] { return sigmoid(x); }, {&x});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Elementwise, SigmoidStaysInsideUnitInterval) {
  auto y = sigmoid(Tensor::vector({-30.0, -5.0, 5.0, 30.0}));
  for (double v : y.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::scalar(-2.0)), DomainError);
}

TEST(Elementwise, ClampGradientIsZeroBelowAndOneAbove) {
  auto x = Tensor::vector({-2.0, -1e-9, 0.0, 1e-9, 3.0}, true);
  backward(sum(clamp_min_zero(x)));
  const std::vector<double> expected{0, 0, 0, 1, 1};
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(x.grad()[i], expected[i]) << i;
  const auto y = clamp_min_zero(x);
  for (double v : y.data()) EXPECT_GE(v, 0.0);
}

TEST(Elementwise, ScalarBroadcast) {
  auto s = Tensor::scalar(2.0, true);
  auto v = Tensor::vector({1.0, 2.0, 3.0}, true);
  auto y = sum(mul(s, v));
  EXPECT_DOUBLE_EQ(y.item(), 12.0);
  backward(y);
  EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(v.grad()[2], 2.0);
  EXPECT_THROW(add(Tensor::vector({1.0, 2.0}), Tensor::vector({1.0, 2.0, 3.0})), DimensionError);
}

TEST(Softmax, UniformAndStable) {
  auto p = softmax(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  auto q = softmax(Tensor::matrix(1, 3, {1000, 0, 0}));
  EXPECT_NEAR(q[0], 1.0, 1e-12);
  EXPECT_NEAR(q[1], 0.0, 1e-12);
  for (double v : q.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, RowsSumToOneAndGradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto logits = random_matrix(rng, 2, 3);
  auto weights = random_matrix(rng, 2, 3, false);
  auto p = softmax(logits);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p[r * 3] + p[r * 3 + 1] + p[r * 3 + 2], 1.0, 1e-12);
  auto res = check_gradients([&] { return sum(mul(softmax(logits), weights)); }, {&logits});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Backward, BasicCalculus) {
  auto x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

  auto v = Tensor::vector({-1.0, 2.0}, true);
  backward(sum(relu(v)));
  EXPECT_EQ(v.grad()[0], 0.0);
  EXPECT_EQ(v.grad()[1], 1.0);
}

TEST(Backward, RequiresScalarRoot) {
  auto v = Tensor::vector({1.0, 2.0}, true);
  EXPECT_THROW(backward(mul_scalar(v, 2.0)), UsageError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = Tensor::scalar(3.0, true);
  auto y = mul(x, x);
  backward(y);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Tensor::scalar(2.0, true);
  auto s = exp(x);
  auto y = add(s, s);  // diamond
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * std::exp(2.0));
  const auto g = ComputationGraph::trace(y);
  EXPECT_EQ(g.nodes.size(), 3u);
  EXPECT_EQ(g.nodes.back(), y.node());
}

TEST(Backward, DeterministicAcrossRuns) {
  Rng rng(5);
  auto w = random_matrix(rng, 4, 3);
  auto x = random_matrix(rng, 6, 4, false);
  auto run = [&] {
    w.zero_grad();
    backward(sum(log(clip(column(softmax(matmul(x, w)), 1), 1e-12, 1.0))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

// Random composed graphs through every op.
TEST(Backward, ComposedGraphsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = random_matrix(rng, 5, 4);
    auto w = random_matrix(rng, 4, 3);
    auto b = random_matrix(rng, 1, 3);
    auto f = [&] {
      auto h = add_row(matmul(x, w), b);
      auto p = softmax(sigmoid(h));
      auto c = clip(column(p, 2), 1e-12, 1.0 - 1e-12);
      auto l = neg(log(c));
      auto rows = std::vector<std::size_t>{0, 2, 2, 4};
      auto g = gather_rows(h, rows);
      auto extra = mean(smooth_l1_elementwise(sub(column(g, 0), column(g, 1))));
      auto t = max_with_scalar(exp(mul_scalar(column(h, 1), 0.3)), 0.5);
      auto cat = concat({l, t});
      return add(add(mean(cat), extra), sum(pow_scalar(add_scalar(neg(c), 1.0), 2.0)));
    };
    auto res = check_gradients(f, {&x, &w, &b});
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed;
  }
}

}  // namespace
}  // namespace pudet
