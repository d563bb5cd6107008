#include <gtest/gtest.h>

#include "kgl/losses.hpp"
#include "test_util.hpp"

using namespace kgl;
using testutil::random_tensor;

namespace {

std::vector<oracle::Vec> rows_of(const Tensor<double>& t) {
  std::vector<oracle::Vec> out;
  for (std::size_t r = 0; r < t.dim(0); ++r) out.emplace_back(t.row(r).begin(), t.row(r).end());
  return out;
}

Tensor<double> unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  auto t = random_tensor({n, d}, rng);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (double v : t.row(r)) s += v * v;
    for (double& v : t.row(r)) v /= std::sqrt(s);
  }
  return t;
}

Var<double> scalar(double v) { return parameter(Tensor<double>({1}, v), "s"); }

}  // namespace

TEST(DescriptorLoss, PerfectSeparationGivesZero) {
  // Orthogonal unit vectors: positives at 0, negatives at sqrt 2 > margin.
  auto a = constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(descriptor_loss(a, a)->value[0], 0.0);
}

TEST(DescriptorLoss, CollapsedDescriptorsGiveMargin) {
  auto a = constant(Tensor<double>({3, 2}, {1, 0, 1, 0, 1, 0}));
  EXPECT_NEAR(descriptor_loss(a, a)->value[0], 1.0, 1e-12);
  DescriptorLossOptions o;
  o.margin = 0.3;
  EXPECT_NEAR(descriptor_loss(a, a, o)->value[0], 0.3, 1e-12);
}

TEST(DescriptorLoss, MatchesLoopOracle) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {2u, 7u, 32u}) {
    auto a = unit_rows(n, 16, rng), b = unit_rows(n, 16, rng);
    EXPECT_NEAR(descriptor_loss(constant(a), constant(b))->value[0], oracle::triplet_loop(rows_of(a), rows_of(b), 1.0),
                1e-12);
  }
}

TEST(DescriptorLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto a = parameter(unit_rows(6, 5, rng), "a"), b = parameter(unit_rows(6, 5, rng), "b");
  // Fixed negatives so the finite-difference probe cannot flip the mining.
  const auto idx = hard_negative_indices(distance_matrix(b->value, a->value));
  for (auto kind : {DescriptorLossKind::hardest_triplet, DescriptorLossKind::hynet_hybrid}) {
    DescriptorLossOptions o;
    o.kind = kind;
    o.margin = 3.0;  // keep every anchor active
    o.hybrid_margin = 6.0;
    auto f = testutil::prepare_gradcheck([&] { return descriptor_loss(a, b, idx, o); }, {a, b});
    EXPECT_LT(oracle::max_grad_rel_error(f, {a, b}), 1e-6) << to_string(kind);
  }
}

TEST(DescriptorLoss, HybridEqualsTripletWhenDotProductsCancel) {
  // With alpha = 0 the hybrid score is the plain distance.
  std::mt19937_64 rng(3);
  auto a = constant(unit_rows(5, 4, rng)), b = constant(unit_rows(5, 4, rng));
  DescriptorLossOptions h;
  h.kind = DescriptorLossKind::hynet_hybrid;
  h.hybrid_alpha = 0;
  h.hybrid_margin = 1.0;
  EXPECT_NEAR(descriptor_loss(a, b, h)->value[0], descriptor_loss(a, b)->value[0], 1e-12);
}

TEST(DescriptorLoss, InvalidInputsThrow) {
  auto a = constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  EXPECT_THROW(descriptor_loss(a, a, std::vector<std::size_t>{0, 0}), ShapeError);
  EXPECT_THROW(descriptor_loss(a, a, std::vector<std::size_t>{1}), ShapeError);
  EXPECT_THROW(descriptor_loss(a, constant(Tensor<double>({2, 3}))), ShapeError);
  EXPECT_THROW(parse_descriptor_loss("hinge"), ConfigError);
}

TEST(MetricLoss, HandValues) {
  auto z = constant(Tensor<double>({2}, {20, -20}));
  EXPECT_LT(metric_loss(z, {1, 0})->value[0], 1e-8);
  EXPECT_NEAR(metric_loss(constant(Tensor<double>({1}, 0.0)), {1})->value[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(metric_loss(constant(Tensor<double>({1}, 0.0)), {0})->value[0], std::log(2.0), 1e-15);
}

TEST(MetricLoss, StableForLargeLogits) {
  auto z = constant(Tensor<double>({2}, {1000, -1000}));
  const double l = metric_loss(z, {0, 1})->value[0];
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 1000.0, 1e-9);
}

TEST(MetricLoss, MatchesDirectFormula) {
  std::mt19937_64 rng(4);
  const auto z = oracle::random_vec(50, rng, -6, 6);
  std::vector<int> y(50);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 3 == 0);
  EXPECT_NEAR(metric_loss(constant(Tensor<double>({50}, z)), y)->value[0], oracle::bce_direct(z, y), 1e-12);
}

TEST(MetricLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto z = parameter(random_tensor({9}, rng, -4, 4), "z");
  const std::vector<int> y{1, 0, 1, 1, 0, 0, 1, 0, 1};
  auto f = testutil::prepare_gradcheck([&] { return metric_loss(z, y); }, {z});
  EXPECT_LT(oracle::max_grad_rel_error(f, {z}), 1e-7);
}

TEST(MetricLoss, RejectsBadLabels) {
  auto z = constant(Tensor<double>({2}, {0, 0}));
  EXPECT_THROW(metric_loss(z, {1, 2}), DataError);
  EXPECT_THROW(metric_loss(z, {1}), ShapeError);
}

TEST(FeatureGuidedLoss, HandValues) {
  auto f = constant(Tensor<double>({1, 2}, {3, 4}));
  auto g = constant(Tensor<double>({1, 2}, {0, 0}));
  EXPECT_NEAR(feature_guided_loss(f, g)->value[0], 5.0, 1e-15);
  EXPECT_EQ(feature_guided_loss(f, f)->value[0], 0.0);
  // Mean over samples, not a global norm.
  auto f2 = constant(Tensor<double>({2, 2}, {3, 4, 6, 8}));
  auto g2 = constant(Tensor<double>({2, 2}, 0.0));
  EXPECT_NEAR(feature_guided_loss(f2, g2)->value[0], 7.5, 1e-15);
}

TEST(FeatureGuidedLoss, HomogeneousOfDegreeOne) {
  std::mt19937_64 rng(6);
  auto f = random_tensor({4, 3, 2, 2}, rng), g = random_tensor({4, 3, 2, 2}, rng);
  const double base = feature_guided_loss(constant(f), constant(g))->value[0];
  for (auto& v : f.vec()) v *= 2.5;
  for (auto& v : g.vec()) v *= 2.5;
  EXPECT_NEAR(feature_guided_loss(constant(f), constant(g))->value[0], 2.5 * base, 1e-12);
}

TEST(FeatureGuidedLoss, GradientsAreOppositeOnBothSides) {
  std::mt19937_64 rng(7);
  auto f = parameter(random_tensor({3, 2, 2, 2}, rng), "f");
  auto g = parameter(random_tensor({3, 2, 2, 2}, rng), "g");
  backward(feature_guided_loss(f, g));
  for (std::size_t i = 0; i < f->value.size(); ++i) EXPECT_NEAR(f->grad[i], -g->grad[i], 1e-15);
  f->zero_grad();
  g->zero_grad();
  auto fn = testutil::prepare_gradcheck([&] { return feature_guided_loss(f, g); }, {f, g});
  EXPECT_LT(oracle::max_grad_rel_error(fn, {f, g}), 1e-7);
}

TEST(FeatureGuidedLoss, ZeroDistanceHasZeroGradient) {
  auto f = parameter(Tensor<double>({1, 3}, {1, 2, 3}), "f");
  auto g = parameter(Tensor<double>({1, 3}, {1, 2, 3}), "g");
  backward(feature_guided_loss(f, g));
  for (double v : f->grad.vec()) EXPECT_EQ(v, 0.0);
}

TEST(TotalLoss, WeightedCombination) {
  LossTerms<double> t{scalar(0.5), scalar(0.3), scalar(0.1), scalar(0.1)};
  LossBreakdown br;
  auto l = total_loss(t, LossWeights{}, &br);
  EXPECT_NEAR(l->value[0], 1.0, 1e-15);
  EXPECT_NEAR(br.total, 1.0, 1e-15);
  EXPECT_EQ(br.metric, 0.3);
  EXPECT_NEAR(total_loss(t, LossWeights{2.0, 0.5})->value[0], 0.5 + 0.6 + 0.1, 1e-15);
}

TEST(TotalLoss, ZeroBetaDropsGuidanceGradient) {
  LossTerms<double> t{scalar(0.5), scalar(0.3), scalar(0.1), scalar(0.1)};
  auto l = total_loss(t, LossWeights{1.0, 0.0});
  EXPECT_NEAR(l->value[0], 0.8, 1e-15);
  backward(l);
  EXPECT_EQ(t.guide_a->grad[0], 0.0);
  EXPECT_EQ(t.metric->grad[0], 1.0);
  EXPECT_EQ(t.descriptor->grad[0], 1.0);
}

TEST(TotalLoss, MissingTermsCountAsZero) {
  LossTerms<double> t{nullptr, scalar(0.7), nullptr, nullptr};
  EXPECT_NEAR(total_loss(t, LossWeights{})->value[0], 0.7, 1e-15);
}

TEST(TotalLoss, NonFiniteComponentRaisesDivergence) {
  LossTerms<double> t{scalar(0.5), scalar(std::nan("")), scalar(0.1), scalar(0.1)};
  try {
    total_loss(t, LossWeights{}, nullptr, 17);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.component(), "L_m");
    EXPECT_EQ(e.step(), 17);
    EXPECT_EQ(e.exit_code(), 4);
  }
  LossTerms<double> inf{scalar(INFINITY), nullptr, nullptr, nullptr};
  EXPECT_THROW(total_loss(inf, LossWeights{}), DivergenceError);
}
