#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "pudet/losses.hpp"

namespace pudet {
namespace {

using testing::random_probs;
using testing::random_prob_rows;

Tensor vec(std::vector<double> v, bool grad = false) { return Tensor::vector(std::move(v), grad); }

// ---------------------------------------------------------------------------
// Per-sample losses

TEST(CrossEntropy, BinaryExamples) {
  EXPECT_NEAR(ce(0.5, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(ce(1.0 - 1e-12, 1), 0.0, 1e-11);
  EXPECT_NEAR(ce(0.9, 0), 2.302585092994046, 1e-12);
  EXPECT_TRUE(std::isfinite(ce(0.0, 1)));
  EXPECT_TRUE(std::isfinite(ce(1.0, 0)));
}

TEST(CrossEntropy, CategoricalExamples) {
  const std::vector<double> uniform{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_NEAR(categorical_ce(uniform, 1), std::log(3.0), 1e-12);
  const std::vector<double> c{0.2, 0.5, 0.3};
  EXPECT_NEAR(categorical_ce(c, 1), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, CategoricalReducesToBinaryForTwoClasses) {
  Rng rng(1);
  for (double c : random_probs(rng, 50)) {
    const std::vector<double> row{1.0 - c, c};
    EXPECT_NEAR(categorical_ce(row, 1), ce(c, 1), 1e-12);
    EXPECT_NEAR(categorical_ce(row, 0), ce(c, 0), 1e-12);
  }
}

TEST(CrossEntropy, TensorFormMatchesScalarForm) {
  Rng rng(2);
  const auto cs = random_probs(rng, 20);
  for (int z : {0, 1}) {
    const Tensor h = ce(vec(cs), z);
    for (std::size_t i = 0; i < cs.size(); ++i) EXPECT_DOUBLE_EQ(h[i], ce(cs[i], z));
  }
}

TEST(WeightedCe, Examples) {
  Rng rng(3);
  for (double c : random_probs(rng, 10)) {
    EXPECT_DOUBLE_EQ(weighted_ce(c, 1, 1.0), ce(c, 1));
    EXPECT_DOUBLE_EQ(weighted_ce(c, 0, 7.0), weighted_ce(c, 0, 0.5));
  }
  EXPECT_NEAR(weighted_ce(0.5, 1, 4.0), 2.772588722239781, 1e-12);
}

TEST(Focal, Examples) {
  Rng rng(4);
  for (double c : random_probs(rng, 10)) {
    EXPECT_NEAR(focal(c, 1, 0.5, 0.0), 0.5 * ce(c, 1), 1e-15);
    EXPECT_NEAR(focal(c, 0, 0.5, 0.0), 0.5 * ce(c, 0), 1e-15);
  }
  EXPECT_NEAR(focal(0.5, 1), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal(0.043322, 1), 0.25 * std::pow(1 - 0.043322, 2) * -std::log(0.043322), 1e-12);
  EXPECT_LT(focal(1.0 - 1e-9, 1), 1e-18);
}

TEST(Focal, CategoricalTwoClassMatchesBinary) {
  Rng rng(5);
  const Tensor rows = random_prob_rows(rng, 20, 2);
  for (std::size_t z : {0u, 1u}) {
    const Tensor h = categorical_focal(rows, z, 0.25, 2.0);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(h[i], focal(rows[i * 2 + 1], static_cast<int>(z)), 1e-14);
  }
}

// ---------------------------------------------------------------------------
// Risk estimators

TEST(PnLoss, Examples) {
  EXPECT_NEAR(pn_risk(vec({0.1}), vec({0.3})).item(), 0.2, 1e-15);
  EXPECT_NEAR(pn_risk(vec({}), vec({0.3, 0.5})).item(), 0.4, 1e-15);
  EXPECT_THROW(pn_risk(vec({}), vec({})), UsageError);
}

TEST(PnLoss, MatchesBruteForceMean) {
  Rng rng(6);
  const auto cn = random_probs(rng, 10);
  const auto cp = random_probs(rng, 10);
  double total = 0.0;
  for (double c : cn) total += ce(c, 0);
  for (double c : cp) total += ce(c, 1);
  EXPECT_NEAR(cls_loss_pn(vec(cn), vec(cp)).item(), total / 20.0, 1e-13);
}

TEST(MeanRisk, CombinedAndNaiveExamples) {
  EXPECT_NEAR(approx_mean_risk_combined(vec({0.2, 0.4}), vec({0.6})).item(), 0.4, 1e-15);
  EXPECT_NEAR(approx_mean_risk_combined(vec({0.2, 0.4}), vec({})).item(), 0.3, 1e-15);
  EXPECT_NEAR(approx_mean_risk_naive(vec({0.2, 0.4})).item(), 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(approx_mean_risk_naive(vec({0.7})).item(), 0.7);
  EXPECT_THROW(approx_mean_risk_naive(vec({})), UsageError);
  EXPECT_THROW(approx_mean_risk_combined(vec({}), vec({})), UsageError);
}

TEST(MeanRisk, CombinedMatchesBruteForce) {
  Rng rng(7);
  const auto u = random_probs(rng, 30, 0.0, 3.0);
  const auto p = random_probs(rng, 20, 0.0, 3.0);
  const double expected =
      (std::accumulate(u.begin(), u.end(), 0.0) + std::accumulate(p.begin(), p.end(), 0.0)) / 50.0;
  EXPECT_NEAR(approx_mean_risk_combined(vec(u), vec(p)).item(), expected, 1e-14);
}

// ---------------------------------------------------------------------------
// Binary PU

TEST(PuBinary, ClampExampleByHand) {
  const PuLoss r = pu_risk_binary(vec({0.0, 0.0, 0.0}), vec({1.0}), vec({0.2}), 0.8);
  EXPECT_NEAR(r.unclamped_negative_term, 0.25 - 0.8, 1e-15);
  EXPECT_TRUE(r.clamp_active);
  EXPECT_NEAR(r.value.item(), 0.16, 1e-15);
}

TEST(PuBinary, PerfectDetectorGivesZero) {
  const PuLoss r = pu_risk_binary(vec({0.0, 0.0}), vec({0.0}), vec({0.0}), 0.3);
  EXPECT_EQ(r.value.item(), 0.0);
  EXPECT_FALSE(r.clamp_active);
}

TEST(PuBinary, PriorOutsideUnitIntervalIsConfigError) {
  EXPECT_THROW(cls_loss_pu_binary(vec({0.3}), vec({0.7}), 0.0), ConfigError);
  EXPECT_THROW(cls_loss_pu_binary(vec({0.3}), vec({0.7}), 1.0), ConfigError);
}

TEST(PuBinary, PnEquivalenceWhenUnlabeledAreNegative) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto nu = static_cast<std::size_t>(rng.integer(1, 30));
    const auto np = static_cast<std::size_t>(rng.integer(1, 30));
    const auto cu = random_probs(rng, nu, 0.001, 0.3);  // truly negative
    const auto cp = random_probs(rng, np);
    const double prior = static_cast<double>(np) / static_cast<double>(nu + np);
    const PuLoss pu = cls_loss_pu_binary(vec(cu), vec(cp), prior);
    double pos1 = 0.0;
    for (double c : cp) pos1 += ce(c, 1);
    const double unclamped = pu.unclamped_negative_term + prior / static_cast<double>(np) * pos1;
    EXPECT_NEAR(unclamped, cls_loss_pn(vec(cu), vec(cp)).item(), 1e-12);
  }
}

TEST(PuBinary, ClampOffEqualsThreeTermExpression) {
  Rng rng(9);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto cu = random_probs(rng, 20);
    const auto cp = random_probs(rng, 5);
    const double prior = rng.uniform(0.01, 0.3);
    const PuLoss r = cls_loss_pu_binary(vec(cu), vec(cp), prior);
    if (r.unclamped_negative_term < 0.0) continue;
    double hu0 = 0.0, hp0 = 0.0, hp1 = 0.0;
    for (double c : cu) hu0 += ce(c, 0);
    for (double c : cp) hp0 += ce(c, 0), hp1 += ce(c, 1);
    const double expected = (hu0 + hp0) / 25.0 - prior / 5.0 * hp0 + prior / 5.0 * hp1;
    EXPECT_NEAR(r.value.item(), expected, 1e-13);
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(PuBinary, NonNegativeForAllInputs) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const auto cu = random_probs(rng, 5, 1e-6, 1 - 1e-6);
    const auto cp = random_probs(rng, 5, 1e-6, 1 - 1e-6);
    for (PuMode mode : {PuMode::Combined, PuMode::Naive}) {
      const PuLoss r = cls_loss_pu_binary(vec(cu), vec(cp), rng.uniform(0.01, 0.99), mode);
      EXPECT_GE(r.value.item(), 0.0);
      EXPECT_EQ(r.clamp_active, r.unclamped_negative_term < 0.0);
    }
  }
}

TEST(PuBinary, NaiveUsesUnlabeledMeanOnly) {
  const PuLoss r = pu_risk_binary(vec({0.2, 0.4}), vec({0.6}), vec({0.1}), 0.1, PuMode::Naive);
  EXPECT_NEAR(r.unclamped_negative_term, 0.3 - 0.1 * 0.6, 1e-15);
  const PuLoss c = pu_risk_binary(vec({0.2, 0.4}), vec({0.6}), vec({0.1}), 0.1, PuMode::Combined);
  EXPECT_NEAR(c.unclamped_negative_term, 0.4 - 0.1 * 0.6, 1e-15);
}

TEST(PuBinary, NoPositivesDegradesToClampedCombinedMean) {
  const PuLoss r = pu_risk_binary(vec({0.2, 0.4}), vec({}), vec({}), 0.3);
  EXPECT_TRUE(r.no_positives);
  EXPECT_NEAR(r.value.item(), 0.3, 1e-15);
}

TEST(PuBinary, DerivativeWithRespectToPrior) {
  // With fixed H values and an inactive clamp the loss is linear in pi.
  const Tensor hu0 = vec({0.9, 1.1, 0.7});
  const Tensor hp0 = vec({0.5, 0.3});
  const Tensor hp1 = vec({0.2, 0.6});
  const double pi = 0.2, d = 1e-3;
  const double up = pu_risk_binary(hu0, hp0, hp1, pi + d).value.item();
  const double down = pu_risk_binary(hu0, hp0, hp1, pi - d).value.item();
  EXPECT_NEAR((up - down) / (2 * d), -(0.5 + 0.3) / 2 + (0.2 + 0.6) / 2, 1e-10);
}

TEST(PuBinary, GradientThroughInactiveClamp) {
  Rng rng(11);
  Tensor cu = vec(random_probs(rng, 6, 0.3, 0.7), true);
  Tensor cp = vec(random_probs(rng, 3, 0.3, 0.7), true);
  const auto r = cls_loss_pu_binary(cu, cp, 0.1);
  ASSERT_FALSE(r.clamp_active);
  auto res = testing::check_gradients([&] { return cls_loss_pu_binary(cu, cp, 0.1).value; }, {&cu, &cp});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(PuBinary, ActiveClampBlocksNegativeTermGradient) {
  // Unlabeled samples only reach the loss through the clamped term.
  Tensor cu = vec({0.01, 0.02, 0.01}, true);
  Tensor cp = vec({0.6}, true);
  const auto r = cls_loss_pu_binary(cu, cp, 0.9);
  ASSERT_TRUE(r.clamp_active);
  backward(r.value);
  for (double g : cu.grad()) EXPECT_EQ(g, 0.0);
  // d/dc of (pi/N_p) H(c,1) = -pi / c
  EXPECT_NEAR(cp.grad()[0], -0.9 / 0.6, 1e-12);
}

// ---------------------------------------------------------------------------
// Multi-class PU

Tensor two_class_rows(const std::vector<double>& c) {
  std::vector<double> v;
  for (double x : c) v.insert(v.end(), {1.0 - x, x});
  return Tensor::matrix(c.size(), 2, std::move(v));
}

TEST(PuMulticlass, ReducesToBinaryForTwoClasses) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto cu = random_probs(rng, static_cast<std::size_t>(rng.integer(1, 20)));
    const auto cp = random_probs(rng, static_cast<std::size_t>(rng.integer(1, 20)));
    const double prior = rng.uniform(0.01, 0.9);
    const PuLoss b = cls_loss_pu_binary(vec(cu), vec(cp), prior);
    const PuLoss m = cls_loss_pu_multiclass(two_class_rows(cu), {{1, two_class_rows(cp)}}, ClassPriors{{prior}});
    EXPECT_NEAR(m.value.item(), b.value.item(), 1e-12);
    EXPECT_EQ(m.clamp_active, b.clamp_active);
  }
}

TEST(PuMulticlass, AbsentClassContributesNothing) {
  Rng rng(13);
  const Tensor cu = random_prob_rows(rng, 5, 3);
  const Tensor c1 = random_prob_rows(rng, 2, 3);
  const PuLoss with_absent = cls_loss_pu_multiclass(cu, {{1, c1}}, ClassPriors{{0.2, 0.3}});
  // Term-by-term evaluation with only class 1 present.
  double all0 = 0.0, p0 = 0.0, p1 = 0.0;
  for (std::size_t i = 0; i < 5; ++i) all0 += -std::log(cu[i * 3]);
  for (std::size_t i = 0; i < 2; ++i) {
    all0 += -std::log(c1[i * 3]);
    p0 += -std::log(c1[i * 3]);
    p1 += -std::log(c1[i * 3 + 1]);
  }
  const double neg = all0 / 7.0 - 0.2 / 2.0 * p0;
  EXPECT_NEAR(with_absent.value.item(), std::max(0.0, neg) + 0.2 / 2.0 * p1, 1e-13);
}

TEST(PuMulticlass, PnEquivalenceWhenUnlabeledAreNegative) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = static_cast<std::size_t>(rng.integer(3, 5));
    const auto nu = static_cast<std::size_t>(rng.integer(1, 20));
    const Tensor cu = random_prob_rows(rng, nu, m);
    std::map<int, Tensor> pos;
    std::size_t total = nu;
    double pn_sum = 0.0;
    for (std::size_t i = 0; i < nu; ++i) pn_sum += -std::log(cu[i * m]);
    std::vector<std::size_t> counts;
    for (std::size_t c = 1; c < m; ++c) {
      const auto n = static_cast<std::size_t>(rng.integer(1, 10));
      const Tensor rows = random_prob_rows(rng, n, m);
      for (std::size_t i = 0; i < n; ++i) pn_sum += -std::log(rows[i * m + c]);
      pos[static_cast<int>(c)] = rows;
      counts.push_back(n);
      total += n;
    }
    ClassPriors priors;
    for (std::size_t n : counts) priors.values.push_back(static_cast<double>(n) / static_cast<double>(total));
    const PuLoss r = cls_loss_pu_multiclass(cu, pos, priors);
    double positive_term = 0.0;
    for (const auto& [c, rows] : pos) {
      const double k = priors[static_cast<std::size_t>(c)] / static_cast<double>(rows.rows());
      for (std::size_t i = 0; i < rows.rows(); ++i) positive_term += k * -std::log(rows[i * m + c]);
    }
    EXPECT_NEAR(r.unclamped_negative_term + positive_term, pn_sum / static_cast<double>(total), 1e-12);
  }
}

TEST(PuMulticlass, InvalidPriorsAreConfigErrors) {
  Rng rng(15);
  const Tensor cu = random_prob_rows(rng, 3, 3);
  const Tensor c1 = random_prob_rows(rng, 1, 3);
  EXPECT_THROW(cls_loss_pu_multiclass(cu, {{1, c1}}, ClassPriors{{0.6, 0.5}}), ConfigError);
  EXPECT_THROW(cls_loss_pu_multiclass(cu, {{1, c1}}, ClassPriors{{0.0, 0.5}}), ConfigError);
}

// ---------------------------------------------------------------------------
// Localization

TEST(SmoothL1, Examples) {
  const Tensor zero = Tensor::matrix(1, 4, {0, 0, 0, 0});
  EXPECT_EQ(smooth_l1(Tensor::matrix(1, 4, {1, 2, 3, 4}), Tensor::matrix(1, 4, {1, 2, 3, 4})).item(), 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor::matrix(1, 4, {0.5, 0, 0, 0}), zero).item(), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor::matrix(1, 4, {2.0, 0, 0, 0}), zero).item(), 1.5);
  // Averaged over rows, summed over coordinates.
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor::matrix(2, 4, {2, 0, 0, 0.5, 0, 0, 0, 0}), Tensor::matrix(2, 4, std::vector<double>(8, 0.0))).item(),
                   (1.5 + 0.125) / 2.0);
}

// ---------------------------------------------------------------------------
// total_loss

std::vector<SampleAssignment> states(std::initializer_list<std::pair<AssignState, int>> s) {
  std::vector<SampleAssignment> out;
  for (auto [st, cls] : s) {
    SampleAssignment a;
    a.anchor_index = out.size();
    a.state = st;
    a.class_id = cls;
    out.push_back(a);
  }
  return out;
}

TEST(TotalLoss, NoPositivesInPnBaseline) {
  const auto a = states({{AssignState::Unlabeled, 0}, {AssignState::Unlabeled, 0}, {AssignState::Ignored, 0}});
  const Tensor probs = two_class_rows({0.1, 0.3, 0.99});
  const Tensor deltas = Tensor::matrix(3, 4, std::vector<double>(12, 0.5));
  const std::vector<double> targets(12, 0.0);
  const auto r = total_loss(a, probs, deltas, targets, {}, {});
  EXPECT_EQ(r.loc, 0.0);
  EXPECT_NEAR(r.cls, (ce(0.1, 0) + ce(0.3, 0)) / 2.0, 1e-15);
  EXPECT_FALSE(r.clamp_active);
}

TEST(TotalLoss, PuBinaryInactiveClampMatchesTermByTerm) {
  const auto a = states({{AssignState::Unlabeled, 0},
                         {AssignState::Positive, 1},
                         {AssignState::Unlabeled, 0},
                         {AssignState::Ignored, 0},
                         {AssignState::Positive, 1}});
  const std::vector<double> c{0.4, 0.7, 0.2, 0.01, 0.6};
  const Tensor probs = two_class_rows(c);
  const Tensor deltas = Tensor::matrix(5, 4, std::vector<double>(20, 0.0));
  const std::vector<double> targets(20, 0.0);
  LossOptions opts;
  opts.kind = LossKind::PuBinary;
  const double pi = 0.05;
  const auto r = total_loss(a, probs, deltas, targets, ClassPriors{{pi}}, opts);
  ASSERT_FALSE(r.clamp_active);
  const double rx = (ce(0.4, 0) + ce(0.2, 0) + ce(0.7, 0) + ce(0.6, 0)) / 4.0;
  const double expected = rx - pi / 2 * (ce(0.7, 0) + ce(0.6, 0)) + pi / 2 * (ce(0.7, 1) + ce(0.6, 1));
  EXPECT_NEAR(r.cls, expected, 1e-14);
  EXPECT_NEAR(r.total.item(), expected, 1e-14);
}

TEST(TotalLoss, TotalIsClsPlusLocForEveryKind) {
  Rng rng(16);
  for (LossKind kind : {LossKind::PnBaseline, LossKind::PuBinary, LossKind::PuNaive, LossKind::PuMulticlass,
                        LossKind::WceBaseline, LossKind::FocalBaseline}) {
    const int m = kind == LossKind::PuBinary || kind == LossKind::PuNaive ? 2 : 3;
    for (int trial = 0; trial < 10; ++trial) {
      const auto b = testing::random_batch(rng, 12, m, 4);
      const Tensor probs = random_prob_rows(rng, 12, static_cast<std::size_t>(m));
      std::vector<double> d(48);
      for (auto& x : d) x = rng.uniform(-2, 2);
      ClassPriors priors;
      priors.values.assign(static_cast<std::size_t>(m - 1), 0.1);
      LossOptions opts;
      opts.kind = kind;
      opts.loc_weight = 0.7;
      const auto r = total_loss(b.assignments, probs, Tensor::matrix(12, 4, d), b.targets, priors, opts);
      EXPECT_NEAR(r.total.item(), r.cls + r.loc, 1e-12) << to_string(kind);
      EXPECT_EQ(r.clamp_active, r.unclamped_negative_term < 0.0);
      if (!is_pu(kind)) EXPECT_FALSE(r.clamp_active);
    }
  }
}

TEST(TotalLoss, BinaryPuRejectsMultiClassModel) {
  Rng rng(17);
  const auto b = testing::random_batch(rng, 6, 3, 4);
  LossOptions opts;
  opts.kind = LossKind::PuBinary;
  EXPECT_THROW(total_loss(b.assignments, random_prob_rows(rng, 6, 3), Tensor::matrix(6, 4, std::vector<double>(24)),
                          b.targets, ClassPriors{{0.1}}, opts),
               ConfigError);
}

TEST(TotalLoss, UnknownKindIsConfigError) {
  EXPECT_THROW(parse_loss_kind("hinge"), ConfigError);
  for (auto k : {LossKind::PnBaseline, LossKind::PuBinary, LossKind::PuNaive, LossKind::PuMulticlass,
                 LossKind::WceBaseline, LossKind::FocalBaseline})
    EXPECT_EQ(parse_loss_kind(to_string(k)), k);
}

TEST(TotalLoss, GradientsThroughModelMatchFiniteDifferences) {
  for (LossKind kind : {LossKind::PnBaseline, LossKind::PuBinary, LossKind::PuNaive, LossKind::PuMulticlass,
                        LossKind::WceBaseline, LossKind::FocalBaseline}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto res = testing::check_model_gradients(kind, seed);
      EXPECT_LT(res.max_rel_error, 1e-4) << to_string(kind) << " seed " << seed;
    }
  }
}

}  // namespace
}  // namespace pudet
