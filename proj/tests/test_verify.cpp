// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mmfuse/ops.hpp"
#include "mmfuse/verify/alignment.hpp"
#include "mmfuse/verify/gradcheck.hpp"
#include "mmfuse/verify/oracle.hpp"

using namespace mmfuse;
using namespace mmfuse::verify;

namespace {

Tensor<double> random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<double>(rng, shape, lo, hi);
}

}  // namespace

// ---- oracle suite ------------------------------------------------------------

TEST(OracleSuite, SmallRunPasses) {
  const auto reports = run_oracle_suite(10, 42);
  EXPECT_EQ(reports.size(), 25u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.pass) << r.name << " " << r.max_abs_diff;
    EXPECT_LT(r.max_abs_diff, r.tolerance);
  }
}

TEST(OracleSuite, ReportJsonKeys) {
  const nlohmann::json j = check_hmoe_case(3);
  for (const char* k : {"name", "config", "error", "tolerance", "pass"}) EXPECT_TRUE(j.contains(k)) << k;
}

TEST(OracleSuite, DeterministicPerSeed) {
  const auto a = check_attention_case(11), b = check_attention_case(11);
  EXPECT_EQ(a.max_abs_diff, b.max_abs_diff);
  EXPECT_EQ(a.config, b.config);
}

// A perturbed fast path must be caught by the oracle comparison.
TEST(OracleMutation, ScoreScaleChangeIsDetected) {
  Rng rng(5);
  auto layer = AlignedAttentionLayer<double>::init({8, 2, 2}, rng);
  layer.lora.bk = random(rng, {2, 8});
  const auto h_rgb = random(rng, {5, 8}), h_x = random(rng, {5, 8});
  const auto ref = oracle_attention(layer.frozen, &layer.lora, layer.guidance, h_rgb, h_x);
  auto mutated = layer.frozen;
  mutated.scale_mode = ScaleMode::full_dim;
  const auto out = dual_attention_forward(mutated, &layer.lora, layer.guidance, h_rgb, h_x);
  EXPECT_GT(max_abs_diff(out.out_rgb, ref.out_rgb), 1e-11);
  const auto clean = dual_attention_forward(layer.frozen, &layer.lora, layer.guidance, h_rgb, h_x);
  EXPECT_LT(max_abs_diff(clean.out_rgb, ref.out_rgb), 1e-11);
}

TEST(OracleMutation, TinyGateChangeIsDetected) {
  Rng rng(6);
  const auto layer = HmoeLayer<double>::init_dense({8, 2, 3, 2}, rng);
  const auto x = random(rng, {5, 8});
  auto mutated = layer;
  mutated.phi[0] += 1e-8;
  EXPECT_GT(max_abs_diff(hmoe_forward(mutated, x).y_out, oracle_hmoe(layer, x)), 1e-11);
  auto agg = layer;
  agg.config.patch_agg = PatchAgg::mean;
  EXPECT_GT(max_abs_diff(hmoe_forward(agg, x).y_out, oracle_hmoe(layer, x)), 1e-11);
}

TEST(Oracle, AmgAndSplitPrimitives) {
  const auto a = Tensor<double>::matrix({{1, 2}, {3, 4}}), b = Tensor<double>::matrix({{5, 6}, {7, 8}});
  const auto [r, x] = oracle_amg(1.0, 0.0, a, b);
  EXPECT_EQ(r, b);
  EXPECT_EQ(x, b);
  EXPECT_EQ(oracle_split(Tensor<double>::matrix({{1, 2, 3, 4}}), 2), Tensor<double>::matrix({{1, 2}, {3, 4}}));
}

// ---- finite differences ------------------------------------------------------

TEST(FiniteDiff, Quadratic) {
  Rng rng(7);
  const auto theta = random(rng, {3, 4});
  const auto g = finite_diff_grad([](const Tensor<double>& t) { return dot(t, t); }, theta);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_LT(relative_error(2 * theta[i], g[i]), 1e-9);
}

TEST(FiniteDiff, LinearIsExactForAnyStep) {
  Rng rng(8);
  const auto c = random(rng, {5});
  const auto theta = random(rng, {5});
  for (const double eps : {1e-3, 1e-5, 0.25}) {
    const auto g = finite_diff_grad([&](const Tensor<double>& t) { return dot(c, t); }, theta, eps);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g[i], c[i], 1e-10);
  }
}

TEST(FiniteDiff, NonFiniteThrows) {
  const auto theta = Tensor<double>::vector({1.0});
  EXPECT_THROW(finite_diff_grad([](const Tensor<double>&) { return std::nan(""); }, theta), NumericError);
}

TEST(FiniteDiff, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.1), (1.1 - 1.0) / 1.1);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-10, 0.0), 1e-10 / 1e-8);
}

// ---- gradcheck ---------------------------------------------------------------

TEST(GradCheck, AttentionClassesPass) {
  const auto reports = gradcheck_attention(1);
  std::vector<std::string> names;
  for (const auto& r : reports) {
    names.push_back(r.name);
    EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_error;
    EXPECT_EQ(r.pass, r.max_rel_error < r.tolerance);
  }
  for (const char* n : {"attention.ak", "attention.bk", "attention.av", "attention.bv", "attention.w_x",
                        "attention.w_rgb"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
  }
}

TEST(GradCheck, HmoeClassesPass) {
  const auto reports = gradcheck_hmoe(2);
  EXPECT_EQ(reports.size(), 8u);
  for (const auto& r : reports) EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_error;
}

TEST(GradCheck, EncoderAdaptersPass) {
  for (const auto& r : gradcheck_encoder(3)) EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_error;
}

TEST(GradCheck, SuiteSelectsModulesAndFingerprints) {
  const auto a = run_gradcheck_suite("hmoe", 2, 9);
  EXPECT_EQ(a.size(), 16u);
  EXPECT_NE(a[0].fingerprint, a[8].fingerprint);
  EXPECT_EQ(run_gradcheck_suite("hmoe", 2, 9)[0].fingerprint, a[0].fingerprint);
  EXPECT_THROW(run_gradcheck_suite("tensor", 1, 9), ConfigError);
}

// ---- alignment metrics -------------------------------------------------------

class MetricProperty : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  void SetUp() override {
    Rng rng(GetParam());
    const std::size_t heads = 1 + rng.next_u64() % 3, n = 2 + rng.next_u64() % 6;
    const double spread = rng.uniform(0.1, 8.0);
    for (int l = 0; l < 3; ++l) {
      a.push_back(random(rng, {heads, n, n}, -spread, spread));
      b.push_back(random(rng, {heads, n, n}, -spread, spread));
    }
  }
  std::vector<Tensor<double>> a, b;
};

TEST_P(MetricProperty, SelfComparisonIsExact) {
  const auto s = alignment_stats(a, a);
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_EQ(s.cosine[l], 1.0);
    EXPECT_EQ(s.skl[l], 0.0);
  }
  EXPECT_EQ(s.mean_cosine, 1.0);
  EXPECT_EQ(s.mean_skl, 0.0);
}

TEST_P(MetricProperty, SymmetricExactly) {
  const auto ab = alignment_stats(a, b), ba = alignment_stats(b, a);
  EXPECT_EQ(ab.cosine, ba.cosine);
  EXPECT_EQ(ab.skl, ba.skl);
}

TEST_P(MetricProperty, BoundedAndScaleInvariant) {
  const auto s = alignment_stats(a, b);
  std::vector<Tensor<double>> a2, b2;
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_GE(s.cosine[l], -1.0);
    EXPECT_LE(s.cosine[l], 1.0);
    EXPECT_GT(s.skl[l], 0.0);
    a2.push_back(scale(a[l], 3.7));
    b2.push_back(scale(b[l], 3.7));
  }
  const auto scaled = alignment_stats(a2, b2);
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_NEAR(scaled.cosine[l], s.cosine[l], 1e-12);
}

TEST_P(MetricProperty, FullGuidanceSwapPreservesStats) {
  const auto s = alignment_stats(a, b);
  std::vector<Tensor<double>> ga, gb;
  for (std::size_t l = 0; l < a.size(); ++l) {
    const auto m = amg_align<double>({1.0, 1.0}, a[l], b[l]);
    ga.push_back(m.rgb);
    gb.push_back(m.x);
  }
  const auto g = alignment_stats(ga, gb);
  EXPECT_EQ(g.cosine, s.cosine);
  EXPECT_EQ(g.skl, s.skl);
}

INSTANTIATE_TEST_SUITE_P(Seeds, MetricProperty, ::testing::Range<std::uint64_t>(0, 20));

TEST(Metrics, DisjointSupportIsLargeAndFinite) {
  const double p[] = {1.0, 0.0}, q[] = {0.0, 1.0};
  const double v = symmetric_kl(p, q, 2);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, std::log(1.0 / kSklClamp), 1e-9);
}

TEST(Metrics, ZeroMapCosineConventions) {
  const double z[] = {0, 0, 0}, a[] = {1, -2, 3};
  EXPECT_EQ(map_cosine(z, z, 3), 1.0);
  EXPECT_EQ(map_cosine(z, a, 3), 0.0);
  const double na[] = {-1, 2, -3};
  EXPECT_DOUBLE_EQ(map_cosine(a, na, 3), -1.0);
}

TEST(Metrics, RowSoftmaxIsStochastic) {
  Rng rng(10);
  const auto p = row_softmax(random(rng, {2, 4, 4}, -30, 30));
  for (std::size_t r = 0; r < 8; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += p[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Metrics, ShapeMismatchThrows) {
  EXPECT_THROW(alignment_stats({Tensor<double>({1, 3, 3})}, {Tensor<double>({1, 2, 2})}), DimensionError);
  EXPECT_THROW(alignment_stats({Tensor<double>({1, 3, 3})}, {}), DimensionError);
}
