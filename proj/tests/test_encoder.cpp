// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "mmfuse/encoder.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/verify/oracle.hpp"

using namespace mmfuse;

namespace {

Tensor<double> random(Rng& rng, Shape shape) { return uniform_tensor<double>(rng, shape, -1.0, 1.0); }

DualStream<double> random_stream(const EncoderConfig& c, Rng& rng) {
  return {random(rng, {c.n_tokens(), c.d_model}), random(rng, {c.n_tokens(), c.d_model}), c.n_z, c.n_c};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mmfuse_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(EncoderConfig, DefaultsAndInsertionPattern) {
  const EncoderConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.ffn_width(), 3072u);
  EXPECT_EQ(c.n_tokens(), 320u);
  EXPECT_EQ(c.n_inserted(), 6u);
  std::vector<std::size_t> inserted;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    if (c.is_inserted(l)) inserted.push_back(l);
  EXPECT_EQ(inserted, (std::vector<std::size_t>{1, 3, 5, 7, 9, 11}));
}

TEST(EncoderConfig, Validation) {
  auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.insert_every = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.hmoe_ffn.d_model = 16;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.n_c = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(EncoderConfig, JsonRoundTrip) {
  auto c = EncoderConfig::toy(6, 16, 4, 3, 5);
  c.w_init = 0.5;
  c.scale_mode = ScaleMode::full_dim;
  c.hmoe_ffn.patch_agg = PatchAgg::mean;
  const nlohmann::json j = c;
  const auto back = j.get<EncoderConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.scale_mode, ScaleMode::full_dim);
}

TEST(EncoderForward, FunctionPreservingInitMatchesFrozenTowers) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
    c.w_init = 0.0;
    Rng rng(seed);
    const auto w = EncoderWeights<double>::init(c, rng);
    const auto s = random_stream(c, rng);
    const auto out = encoder_forward(w, s);
    const auto rgb = frozen_tower_forward(w, s.h_rgb), x = frozen_tower_forward(w, s.h_x);
    EXPECT_EQ(out.h_rgb, rgb);
    EXPECT_EQ(out.h_x, x);
    EXPECT_EQ(out.fused, add(slice_rows(rgb, c.n_z, c.n_tokens()), slice_rows(x, c.n_z, c.n_tokens())));
  }
}

TEST(EncoderForward, MirroredStreamsStayIdentical) {
  auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
  Rng rng(1);
  const auto w = EncoderWeights<double>::init_dense(c, rng);
  auto s = random_stream(c, rng);
  s.h_x = s.h_rgb;
  const auto out = encoder_forward(w, s);
  EXPECT_EQ(out.h_rgb, out.h_x);
  for (const auto& m : out.maps) EXPECT_EQ(m.rgb, m.x);
}

TEST(EncoderForward, MatchesCompositionOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
    Rng rng(10 + seed);
    const auto w = EncoderWeights<double>::init_dense(c, rng);
    const auto s = random_stream(c, rng);
    const auto out = encoder_forward(w, s);
    const auto ref = verify::oracle_encoder(w, s);
    EXPECT_LT(max_abs_diff(out.fused, ref.fused), 1e-11);
    EXPECT_LT(max_abs_diff(out.h_rgb, ref.h_rgb), 1e-11);
    ASSERT_EQ(out.maps.size(), ref.maps.size());
    for (std::size_t l = 0; l < out.maps.size(); ++l) EXPECT_LT(max_abs_diff(out.maps[l].x, ref.maps[l].second), 1e-11);
  }
}

TEST(EncoderForward, OutputShapes) {
  const auto c = EncoderConfig::toy(2, 8, 2, 3, 5);
  Rng rng(2);
  const auto w = EncoderWeights<double>::init(c, rng);
  const auto out = encoder_forward(w, random_stream(c, rng));
  EXPECT_EQ(out.fused.shape(), (Shape{5, 8}));
  EXPECT_EQ(out.maps.size(), 2u);
  EXPECT_EQ(out.maps[0].rgb.shape(), (Shape{2, 8, 8}));
}

TEST(EncoderForward, RejectsMismatchedStream) {
  const auto c = EncoderConfig::toy(2, 8, 2, 3, 5);
  Rng rng(3);
  const auto w = EncoderWeights<double>::init(c, rng);
  auto s = random_stream(c, rng);
  s.n_c = 4;
  EXPECT_ANY_THROW(encoder_forward(w, s));
}

TEST(EncoderForward, TemplateMixerSeesOnlyTemplateTokens) {
  const auto c = EncoderConfig::toy(2, 8, 2, 3, 5);
  Rng rng(4);
  const auto w = EncoderWeights<double>::init_dense(c, rng);
  const auto out = encoder_forward(w, random_stream(c, rng));
  const auto& lc = out.cache.layers[1];
  ASSERT_TRUE(lc.inserted);
  EXPECT_EQ(lc.attn_z.x_in.rows(), 2 * c.n_z);
  EXPECT_EQ(lc.attn_c.x_in.rows(), 2 * c.n_c);
  EXPECT_EQ(lc.ffn_z.x_in.rows(), 2 * c.n_z);
  // the template-side mixer output is a function of the template rows alone
  const auto& hm = w.adapters[1]->hmoe_attn;
  EXPECT_EQ(hmoe_forward(hm, lc.attn_z.x_in).cache.affinity, lc.attn_z.affinity);
  EXPECT_EQ(lc.attn_z.affinity.rows(), 2 * c.n_z);
}

TEST(EncoderBackward, GradientsOnlyAtInsertedLayers) {
  const auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
  Rng rng(5);
  const auto w = EncoderWeights<double>::init_dense(c, rng);
  const auto s = random_stream(c, rng);
  const auto out = encoder_forward(w, s);
  const auto g = encoder_backward(w, out.cache, s, out.fused);
  ASSERT_EQ(g.adapters.size(), c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) EXPECT_EQ(g.adapters[l].has_value(), c.is_inserted(l));
  EXPECT_GT(max_abs(g.adapters[1]->lora.ak), 0.0);
  EXPECT_GT(max_abs(g.adapters[3]->hmoe_ffn.phi), 0.0);
  EXPECT_EQ(g.h_rgb.shape(), s.h_rgb.shape());
}

TEST(EncoderBackward, InputGradientMatchesFiniteDifference) {
  const auto c = EncoderConfig::toy(2, 8, 2, 2, 3);
  Rng rng(6);
  const auto w = EncoderWeights<double>::init_dense(c, rng);
  const auto s = random_stream(c, rng);
  const auto out = encoder_forward(w, s);
  const auto g = encoder_backward(w, out.cache, s, out.fused);
  const double eps = 1e-5;
  for (const std::size_t i : {0ul, 9ul, 37ul}) {
    auto sp = s, sm = s;
    sp.h_x[i] += eps;
    sm.h_x[i] -= eps;
    const auto fp = encoder_forward(w, sp).fused, fm = encoder_forward(w, sm).fused;
    const double num = (0.5 * dot(fp, fp) - 0.5 * dot(fm, fm)) / (2 * eps);
    EXPECT_NEAR(g.h_x[i], num, 1e-6 * std::max(1.0, std::fabs(num)));
  }
}

// ---- reports -----------------------------------------------------------------

TEST(EncoderParamReport, ReferenceDefaults) {
  const auto r = encoder_param_report(EncoderConfig{});
  EXPECT_EQ(r.amg_lora, 147468u);
  EXPECT_EQ(r.hmoe_attn_block, 27648u);
  EXPECT_EQ(r.hmoe_ffn_block, 43008u);
  EXPECT_EQ(r.hmoe, 423936u);
  EXPECT_EQ(r.learnable, 571404u);
  EXPECT_EQ(r.frozen, 77939712u);
  EXPECT_EQ(r.merged_amg, 12u);
  EXPECT_EQ(r.inserted_layers, 6u);
}

TEST(EncoderParamReport, NoInsertionMeansNothingLearnable) {
  EncoderConfig c;
  c.insert_every = 0;
  const auto r = encoder_param_report(c);
  EXPECT_EQ(r.learnable, 0u);
  EXPECT_TRUE(r.trainable.empty());
  EXPECT_EQ(r.frozen, 77939712u);
}

TEST(EncoderParamReport, CountsMatchAllocatedWeights) {
  const auto c = EncoderConfig::toy(4, 16, 4, 2, 4);
  Rng rng(7);
  const auto w = EncoderWeights<double>::init(c, rng);
  std::size_t learnable = 0, frozen = 0;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    frozen += w.blocks[l].param_count();
    if (w.adapters[l]) learnable += w.adapters[l]->param_count();
  }
  const auto r = encoder_param_report(c);
  EXPECT_EQ(r.learnable, learnable);
  EXPECT_EQ(r.frozen, frozen);
}

TEST(EncoderMacs, ReferenceDefaultsAndHeadInsensitivity) {
  EncoderConfig c;
  EXPECT_EQ(encoder_mac_count(c).total, 53923479552ull);
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (const std::size_t h : {1, 2, 4, 8}) {
    c.hmoe_attn.heads_per_expert = c.hmoe_ffn.heads_per_expert = h;
    const auto m = encoder_mac_count(c);
    EXPECT_EQ(m.total, m.frozen + m.lora + m.hmoe);
    lo = std::min(lo, m.total);
    hi = std::max(hi, m.total);
  }
  EXPECT_LT(static_cast<double>(hi - lo) / lo, 0.01);
}

// ---- checkpoint --------------------------------------------------------------

TEST(Checkpoint, RoundTripPreservesForward) {
  const auto c = EncoderConfig::toy(4, 8, 2, 2, 4);
  Rng rng(8);
  const auto w = EncoderWeights<double>::init_dense(c, rng);
  const auto s = random_stream(c, rng);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir, w);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  const auto back = load_checkpoint<double>(dir);
  EXPECT_EQ(encoder_forward(back, s).fused, encoder_forward(w, s).fused);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingOrCorruptIsFormatError) {
  EXPECT_THROW(load_checkpoint<double>(temp_dir("absent")), FormatError);
  const auto c = EncoderConfig::toy(2, 8, 2, 2, 4);
  Rng rng(9);
  const auto dir = temp_dir("corrupt");
  save_checkpoint(dir, EncoderWeights<double>::init(c, rng));
  {
    std::ofstream os(dir / "config.json");
    os << R"({"n_layers": 2, "d_model": 9})";
  }
  EXPECT_THROW(load_checkpoint<double>(dir), FormatError);
  std::filesystem::remove_all(dir);
}
