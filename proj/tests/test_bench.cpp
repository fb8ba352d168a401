// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mmfuse/bench/comparators.hpp"
#include "mmfuse/bench/harness.hpp"
#include "mmfuse/ops.hpp"

using namespace mmfuse;
using namespace mmfuse::bench;

namespace {

FusionConfig small(std::size_t n = 6, std::size_t d = 8) {
  FusionConfig c;
  c.n_tokens = n;
  c.d_model = d;
  c.n_experts = 3;
  c.heads_per_expert = 2;
  c.expert_rank = 2;
  c.proj_rank = 3;
  return c;
}

TimingProtocol fast_protocol() {
  TimingProtocol p;
  p.min_sample_seconds = 1e-5;
  return p;
}

}  // namespace

TEST(Variant, ParseAndName) {
  EXPECT_EQ(parse_variant("hmoe"), Variant::hmoe);
  EXPECT_EQ(parse_variant("cross_attention"), Variant::xattn);
  EXPECT_EQ(parse_variant("mcp_local"), Variant::mcp);
  EXPECT_EQ(variant_name(parse_variant("xattn")), "xattn");
  EXPECT_THROW(parse_variant("conv"), ConfigError);
}

TEST(Comparators, SameCallShapeForEveryVariant) {
  Rng rng(1);
  const auto c = small();
  const auto a = uniform_tensor<float>(rng, {6, 8}, -1.0, 1.0), b = uniform_tensor<float>(rng, {6, 8}, -1.0, 1.0);
  for (const auto v : {Variant::hmoe, Variant::xattn, Variant::mcp}) {
    const FusionComparator<float> op(v, c, rng);
    const auto out = op.forward(a, b);
    EXPECT_EQ(out.a.shape(), a.shape());
    EXPECT_EQ(out.b.shape(), b.shape());
    EXPECT_TRUE(all_finite(out.a));
    EXPECT_GT(op.param_count(), 0u);
    EXPECT_GT(op.mac_count(), 0u);
    EXPECT_THROW(op.forward(a, uniform_tensor<float>(rng, {5, 8}, -1.0, 1.0)), DimensionError);
  }
}

TEST(Comparators, AnalyticCounts) {
  auto c = small(512, 768);
  c.n_experts = 8;
  c.expert_rank = 4;
  c.proj_rank = 8;
  const std::uint64_t n = 512, d = 768, r = 8;
  EXPECT_EQ(fusion_mac_count(Variant::xattn, c), 4 * n * n * d + 12 * n * d * r);
  EXPECT_EQ(fusion_mac_count(Variant::mcp, c), 4 * n * d * r);
  EXPECT_EQ(fusion_mac_count(Variant::hmoe, c), hmoe_mac_count(c.hmoe_config(), 1024));
  Rng rng(2);
  EXPECT_EQ(FusionComparator<float>(Variant::xattn, c, rng).param_count(), 6 * d * r);
  EXPECT_EQ(FusionComparator<float>(Variant::mcp, c, rng).param_count(), 4 * d * r);
}

TEST(Comparators, CrossAttentionMacsQuadrupleWithTokens) {
  auto c = small(4096, 768);
  c.proj_rank = 8;
  const auto m1 = fusion_mac_count(Variant::xattn, c);
  c.n_tokens *= 2;
  EXPECT_NEAR(static_cast<double>(fusion_mac_count(Variant::xattn, c)) / m1, 4.0, 0.05);
}

class Locality : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(Locality, OnlyMcpIsLocal) {
  Rng rng(GetParam());
  auto c = small(3 + rng.next_u64() % 6, 8 * (1 + rng.next_u64() % 3));
  const auto mcp = locality_check(Variant::mcp, c, GetParam());
  const auto hm = locality_check(Variant::hmoe, c, GetParam());
  const auto xa = locality_check(Variant::xattn, c, GetParam());
  EXPECT_TRUE(mcp.local());
  EXPECT_TRUE(hm.permutation_equivariant);
  EXPECT_FALSE(hm.local());
  EXPECT_TRUE(xa.permutation_equivariant);
  EXPECT_FALSE(xa.local());
}

INSTANTIATE_TEST_SUITE_P(Seeds, Locality, ::testing::Range<std::uint64_t>(0, 10));

// ---- timing ------------------------------------------------------------------

TEST(Timing, QuantileInterpolates) {
  EXPECT_DOUBLE_EQ(quantile({3, 1, 2}, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 1.0), 4.0);
}

TEST(Timing, ProtocolFloor) {
  TimingProtocol p;
  p.iterations = 29;
  EXPECT_THROW(p.validate(), ConfigError);
  p.iterations = 30;
  p.warmup = 4;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Timing, MedianWithinRange) {
  volatile double sink = 0;
  const auto t = time_callable(
      [&] {
        for (int i = 0; i < 200; ++i) sink = sink + std::sqrt(static_cast<double>(i));
      },
      fast_protocol());
  EXPECT_EQ(t.iterations, 30u);
  EXPECT_GE(t.median, t.min);
  EXPECT_LE(t.median, t.max);
  EXPECT_LE(t.q1, t.median);
  EXPECT_GE(t.q3, t.median);
  EXPECT_GE(t.inner, 1u);
}

TEST(Timing, LogLogSlope) {
  EXPECT_NEAR(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
  EXPECT_NEAR(loglog_slope({10, 20, 40}, {5, 10, 20}), 1.0, 1e-12);
}

TEST(BenchScaling, ReportsAndValidation) {
  const auto res = bench_scaling(Variant::mcp, {4, 8, 16}, small(), fast_protocol(), 7);
  ASSERT_EQ(res.reports.size(), 3u);
  EXPECT_EQ(res.reports[1].config.n_tokens, 8u);
  EXPECT_EQ(res.reports[0].seed, 7u);
  EXPECT_EQ(res.reports[0].threads, 1);
  const nlohmann::json j = res.reports[0];
  for (const char* k : {"op", "config", "macs", "params", "median_s", "iqr_s", "iterations", "warmup", "timestamp",
                        "seed"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_THROW(bench_scaling(Variant::mcp, {4, 8}, small(), fast_protocol(), 7), ConfigError);
  EXPECT_THROW(bench_scaling(Variant::mcp, {4, 8, 8}, small(), fast_protocol(), 7), ConfigError);
}

// ---- sweep -------------------------------------------------------------------

TEST(Sweep, HeadsKeepMacsFlatAndFlagBadValues) {
  SweepOptions opt;
  opt.timing = false;
  const auto t = sweep(SweepAxis::heads, {"1", "2", "4", "8", "5", "x"}, EncoderConfig{}, opt);
  ASSERT_EQ(t.rows.size(), 6u);
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_TRUE(t.rows[i].ok) << t.rows[i].error;
    lo = std::min(lo, t.rows[i].macs);
    hi = std::max(hi, t.rows[i].macs);
  }
  EXPECT_LT(static_cast<double>(hi - lo) / lo, 0.01);
  EXPECT_FALSE(t.rows[4].ok);
  EXPECT_FALSE(t.rows[4].error.empty());
  EXPECT_FALSE(t.rows[5].ok);
  EXPECT_NE(t.footer.find("not reproduced"), std::string::npos);
  EXPECT_NE(sweep_text(t).find("error"), std::string::npos);
}

TEST(Sweep, ExpertSplitsOrderByBudget) {
  SweepOptions opt;
  opt.timing = false;
  const auto t = sweep(SweepAxis::experts, {"4/4", "8/4", "4/8", "8/16"}, EncoderConfig{}, opt);
  ASSERT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0].params, 479244u);
  EXPECT_EQ(t.rows[1].params, 571404u);
  EXPECT_EQ(t.rows[2].params, 571404u);
  EXPECT_EQ(t.rows[3].params, 847884u);
}

TEST(Sweep, LoraRankScalesLinearly) {
  SweepOptions opt;
  opt.timing = false;
  const auto t = sweep(SweepAxis::lora_rank, {"4", "8", "16", "768"}, EncoderConfig{}, opt);
  EXPECT_EQ(t.rows[0].amg_params, 73740u);
  EXPECT_EQ(t.rows[1].amg_params, 147468u);
  EXPECT_EQ(t.rows[2].amg_params, 294924u);
  EXPECT_FALSE(t.rows[3].ok);
}

TEST(Sweep, DescriptorsForStructuralAxes) {
  SweepOptions opt;
  opt.timing = false;
  const auto w = sweep(SweepAxis::w_init, {"0", "0.5", "1", "0.3", "abc"}, EncoderConfig{}, opt);
  EXPECT_EQ(w.rows[0].descriptor["guidance"], "none");
  EXPECT_EQ(w.rows[1].descriptor["guidance"], "mean");
  EXPECT_EQ(w.rows[2].descriptor["guidance"], "cross");
  EXPECT_EQ(w.rows[3].descriptor["guidance"], "custom");
  EXPECT_FALSE(w.rows[4].ok);
  const auto wt = sweep(SweepAxis::weight_type, {"kv", "qv", "qkv", "z"}, EncoderConfig{}, opt);
  EXPECT_TRUE(wt.rows[0].ok);
  EXPECT_TRUE(wt.rows[1].ok);
  EXPECT_GT(wt.rows[2].amg_params, wt.rows[0].amg_params);
  EXPECT_FALSE(wt.rows[3].ok);
  EXPECT_THROW(parse_axis("depth"), ConfigError);
}

TEST(Sweep, TimedRowOnSmallConfig) {
  SweepOptions opt;
  opt.protocol = fast_protocol();
  const auto t = sweep(SweepAxis::hmoe_rank, {"2", "3"}, EncoderConfig::toy(4, 16, 2, 2, 6), opt);
  for (const auto& r : t.rows) {
    ASSERT_TRUE(r.ok) << r.error;
    EXPECT_TRUE(r.timed);
    EXPECT_GT(r.timing.median, 0.0);
  }
}

// ---- audit -------------------------------------------------------------------

TEST(Audit, ReferenceDefaults) {
  const auto a = audit(EncoderConfig{});
  EXPECT_EQ(a.params.amg_lora, 147468u);
  EXPECT_EQ(a.params.hmoe, 423936u);
  EXPECT_EQ(a.params.learnable, 571404u);
  const nlohmann::json j = a;
  EXPECT_EQ(j["reference"]["hmoe"]["delta"], -36064.0);
  EXPECT_NEAR(j["reference"]["hmoe"]["relative"].get<double>(), -0.0784, 1e-12);
  EXPECT_EQ(j["merged"]["amg_lora_learnable"], 12);
  EXPECT_EQ(j["macs"]["total"], 53923479552ull);
  const auto text = audit_text(a);
  EXPECT_NE(text.find("147,468"), std::string::npos);
  EXPECT_NE(text.find("0.46M"), std::string::npos);
}

TEST(Audit, Deterministic) {
  const nlohmann::json a = audit(EncoderConfig{}), b = audit(EncoderConfig{});
  EXPECT_EQ(a, b);
}
