// SPDX-License-Identifier: Apache-2.0
// One PASS/FAIL line per acceptance criterion. Optional arguments select
// criteria by number; MMFUSE_SEED overrides the default seed.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "mmfuse/bench/comparators.hpp"
#include "mmfuse/bench/harness.hpp"
#include "mmfuse/encoder.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/verify/alignment.hpp"
#include "mmfuse/verify/gradcheck.hpp"
#include "mmfuse/verify/oracle.hpp"

using namespace mmfuse;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<double>(rng, shape, lo, hi);
}

// 1
Outcome oracle_equivalence(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = verify::run_oracle_suite(100, seed);
  const double elapsed = seconds_since(t0);
  std::size_t attn = 0, hmoe = 0, failed = 0;
  double worst = 0;
  for (const auto& r : reports) {
    attn += r.name.rfind("attention", 0) == 0;
    hmoe += r.name.rfind("hmoe", 0) == 0;
    failed += !(r.max_abs_diff < 1e-11);
    worst = std::max(worst, r.max_abs_diff);
  }
  return {attn >= 100 && hmoe >= 100 && failed == 0 && elapsed < 60.0,
          fmt("%zu attention + %zu hmoe + %zu encoder configs, max abs diff %.2e (< 1e-11), %zu failed, %.2f s (< 60 s)",
              attn, hmoe, reports.size() - attn - hmoe, worst, failed, elapsed)};
}

// 2
Outcome gradient_correctness(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = verify::run_gradcheck_suite("all", 10, seed);
  const double elapsed = seconds_since(t0);
  const std::vector<std::string> required = {"attention.ak",     "attention.bk",     "attention.av",
                                             "attention.bv",     "attention.w_x",    "attention.w_rgb",
                                             "hmoe.phi",         "hmoe.expert.a",    "hmoe.expert.b",
                                             "hmoe.pre.a",       "hmoe.pre.b",       "hmoe.post.a",
                                             "hmoe.post.b"};
  std::map<std::string, std::size_t> seen;
  std::size_t failed = 0;
  double worst = 0;
  for (const auto& r : reports) {
    ++seen[r.name];
    failed += !(r.max_rel_error < 1e-6);
    worst = std::max(worst, r.max_rel_error);
  }
  std::size_t min_configs = SIZE_MAX;
  for (const auto& n : required) min_configs = std::min(min_configs, seen[n]);
  return {failed == 0 && min_configs >= 10 && elapsed < 300.0,
          fmt("%zu checks over %zu parameter classes, every required class on >= %zu configs, worst rel err %.2e "
              "(< 1e-6), %zu failed, %.2f s (< 300 s)",
              reports.size(), seen.size(), min_configs, worst, failed, elapsed)};
}

// 3
Outcome amg_identities(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t violations = 0, cases = 0, elements = 0;
  for (int c = 0; c < 200; ++c) {
    const Shape shape{1 + rng.next_u64() % 4, 1 + rng.next_u64() % 9, 1 + rng.next_u64() % 9};
    const double spread = std::pow(10.0, rng.uniform(-6.0, 6.0));
    const auto a = random(rng, shape, -spread, spread), b = random(rng, shape, -spread, spread);
    const double w = rng.uniform(0.0, 1.0), w2 = rng.uniform(0.0, 1.0), wild = rng.uniform(-10.0, 10.0);
    const auto id = amg_align<double>({0.0, 0.0}, a, b);
    const auto sw = amg_align<double>({1.0, 1.0}, a, b);
    const auto eq = amg_align<double>({wild, w}, a, a);
    const auto mean = amg_align<double>({0.5, 0.5}, a, b);
    const auto cv = amg_align<double>({w, w2}, a, b);
    const auto half = scale(add(a, b), 0.5);
    violations += !(id.rgb == a && id.x == b) + !(sw.rgb == b && sw.x == a) + !(eq.rgb == a && eq.x == a) +
                  !(mean.rgb == half && mean.x == half);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double lo = std::min(a[i], b[i]), hi = std::max(a[i], b[i]);
      violations += cv.rgb[i] < lo || cv.rgb[i] > hi || cv.x[i] < lo || cv.x[i] > hi;
    }
    ++cases;
    elements += a.size();
  }
  return {violations == 0, fmt("%zu random map pairs (%zu elements, magnitudes 1e-6..1e6): w=0 identity, w=1 swap, "
                               "equal inputs fixed, w=0.5 mean, convexity; %zu violations",
                               cases, elements, violations)};
}

// 4
Outcome stochasticity(std::uint64_t seed) {
  Rng rng(seed);
  double worst_col = 0, worst_row = 0;
  std::size_t negative = 0;
  const int configs = 200;
  for (int c = 0; c < configs; ++c) {
    const std::size_t h = 1 + rng.next_u64() % 4, sub = 2 + rng.next_u64() % 6;
    const std::size_t r = 1 + rng.next_u64() % (sub - 1), e = 1 + rng.next_u64() % 8, n = 1 + rng.next_u64() % 24;
    const HmoeConfig cfg{h * sub, h, e, r, rng.next_u64() % 2 ? PatchAgg::sum : PatchAgg::mean};
    const auto layer = HmoeLayer<double>::init_dense(cfg, rng);
    const double spread = rng.uniform(0.5, 20.0);
    const auto res = hmoe_forward(layer, random(rng, {n, cfg.d_model}, -spread, spread));
    const auto& w = res.cache.mix.weights;
    for (std::size_t k = 0; k < w.cols(); ++k) {
      double s = 0;
      for (std::size_t i = 0; i < w.rows(); ++i) s += w(i, k), negative += w(i, k) < 0;
      worst_col = std::max(worst_col, std::fabs(s - 1));
    }
    const auto& a = res.cache.affinity;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k), negative += a(i, k) < 0;
      worst_row = std::max(worst_row, std::fabs(s - 1));
    }
  }
  return {worst_col <= 1e-12 && worst_row <= 1e-12 && negative == 0,
          fmt("%d random HMoE configs: max |column sum - 1| of mixing weights %.2e, max |row sum - 1| of affinity "
              "%.2e (<= 1e-12), %zu negative entries",
              configs, worst_col, worst_row, negative)};
}

// 5
Outcome merge_equivalence(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  std::size_t lora_params = 0;
  const int layers = 3;
  for (int c = 0; c < layers; ++c) {
    auto layer = AlignedAttentionLayer<double>::init({768, 12, 8, 1.0}, rng);
    layer.lora.bk = xavier_init<double>(rng, {8, 768});
    layer.lora.bv = xavier_init<double>(rng, {8, 768});
    layer.guidance = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    const DualStream<double> s{random(rng, {24, 768}), random(rng, {24, 768}), 8, 16};
    const auto merged = merge_lora(layer);
    lora_params += merged.lora_param_count();
    const auto a = attention_forward(layer, s), b = attention_forward(merged, s);
    worst = std::max({worst, max_abs_diff(a.out_rgb, b.out_rgb), max_abs_diff(a.out_x, b.out_x)});
  }
  return {worst < 1e-12 && lora_params == 0,
          fmt("%d layers at D=768, r=8, 12 heads, N=24: max abs diff merged vs bypass %.2e (< 1e-12); merged LoRA "
              "parameters %zu",
              layers, worst, lora_params)};
}

// 6
Outcome parameter_budget() {
  const auto a = bench::audit(EncoderConfig{});
  const double amg_m = a.params.amg_lora / 1e6;
  // leading two significant figures, truncated
  const double amg_2sf = std::floor(amg_m * 100) / 100;
  const double hmoe_rel = (a.params.hmoe - a.reference.hmoe) / a.reference.hmoe;
  const bool pass = a.params.amg_lora == 147468 && std::fabs(amg_2sf - 0.14) < 1e-12 && a.params.hmoe == 423936 &&
                    std::fabs(hmoe_rel) <= 0.15;
  return {pass, fmt("AMG-LoRA %zu (%.6fM, 2 s.f. truncated %.2fM vs reference 0.14M; rounds to %.2fM); HMoE %zu "
                    "vs reference 0.46M, delta %+.0f (%+.1f%%, within 15%%); learnable %zu vs reference 0.6M",
                    a.params.amg_lora, amg_m, amg_2sf, std::round(amg_m * 100) / 100, a.params.hmoe,
                    a.params.hmoe - a.reference.hmoe, 100 * hmoe_rel, a.params.learnable)};
}

// 7
Outcome complexity_scaling(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  bench::FusionConfig cfg;
  cfg.d_model = 768;
  cfg.n_experts = 8;
  cfg.heads_per_expert = 2;
  const std::vector<std::size_t> ns{128, 256, 512, 1024};
  const bench::TimingProtocol protocol;
  const auto hm = bench::bench_scaling(bench::Variant::hmoe, ns, cfg, protocol, seed);
  const auto xa = bench::bench_scaling(bench::Variant::xattn, ns, cfg, protocol, seed);
  const double ratio = xa.reports[2].timing.median / hm.reports[2].timing.median;
  const double elapsed = seconds_since(t0);
  const bool pass = hm.slope >= 0.8 && hm.slope <= 1.3 && xa.slope >= 1.7 && xa.slope <= 2.3 && ratio >= 1.2 &&
                    elapsed < 600.0;
  return {pass, fmt("f32 single thread, N=128..1024, D=768, e=8, h=2: hmoe slope %.3f (in [0.8, 1.3]), xattn slope "
                    "%.3f (in [1.7, 2.3]); at N=512 hmoe %.4f s vs xattn %.4f s, %.2fx (>= 1.2x); timings %s; "
                    "%.1f s",
                    hm.slope, xa.slope, hm.reports[2].timing.median, xa.reports[2].timing.median, ratio,
                    hm.reliable && xa.reliable ? "reliable" : "flagged unreliable", elapsed)};
}

// 8
Outcome mac_insensitivity() {
  EncoderConfig c;
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (const std::size_t h : {1, 2, 4, 8}) {
    c.hmoe_attn.heads_per_expert = c.hmoe_ffn.heads_per_expert = h;
    const auto m = encoder_mac_count(c).total;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  const double spread = static_cast<double>(hi - lo) / lo;
  return {spread < 0.01, fmt("encoder forward MACs at N=320 per stream, D=768, e=4/8, h in {1,2,4,8}: %.4e .. %.4e, "
                             "spread %.3f%% (< 1%%)",
                             static_cast<double>(lo), static_cast<double>(hi), 100 * spread)};
}

// 9
Outcome function_preserving(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t mismatches = 0, runs = 0;
  const std::vector<EncoderConfig> configs = {EncoderConfig::toy(4, 8, 2, 2, 4), EncoderConfig::toy(6, 16, 4, 3, 9),
                                              EncoderConfig::toy(12, 64, 4, 4, 16)};
  for (auto c : configs) {
    c.w_init = 0.0;
    for (int k = 0; k < 4; ++k) {
      const auto w = EncoderWeights<double>::init(c, rng);
      const DualStream<double> s{random(rng, {c.n_tokens(), c.d_model}), random(rng, {c.n_tokens(), c.d_model}),
                                 c.n_z, c.n_c};
      const auto out = encoder_forward(w, s);
      const auto rgb = frozen_tower_forward(w, s.h_rgb), x = frozen_tower_forward(w, s.h_x);
      const auto fused = add(slice_rows(rgb, c.n_z, c.n_tokens()), slice_rows(x, c.n_z, c.n_tokens()));
      mismatches += !(out.h_rgb == rgb && out.h_x == x && out.fused == fused);
      ++runs;
    }
  }
  return {mismatches == 0, fmt("%zu encoders (up to 12 layers, D=64) at w_init=0, B=0, zero-output HMoE: %zu not "
                               "bit-identical to the frozen two-tower baseline",
                               runs, mismatches)};
}

// 10
Outcome alignment_metrics(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t violations = 0;
  double worst_scale = 0;
  const int cases = 100;
  for (int c = 0; c < cases; ++c) {
    const std::size_t heads = 1 + rng.next_u64() % 4, n = 1 + rng.next_u64() % 12, layers = 1 + rng.next_u64() % 4;
    const double spread = std::pow(10.0, rng.uniform(-2.0, 1.5));
    std::vector<Tensor<double>> a, b, as, bs;
    const double k = std::pow(10.0, rng.uniform(-3.0, 3.0));
    for (std::size_t l = 0; l < layers; ++l) {
      a.push_back(random(rng, {heads, n, n}, -spread, spread));
      b.push_back(random(rng, {heads, n, n}, -spread, spread));
      as.push_back(scale(a.back(), k));
      bs.push_back(scale(b.back(), k));
    }
    const auto self = verify::alignment_stats(a, a);
    for (std::size_t l = 0; l < layers; ++l) violations += self.cosine[l] != 1.0 || self.skl[l] != 0.0;
    const auto ab = verify::alignment_stats(a, b), ba = verify::alignment_stats(b, a);
    violations += ab.cosine != ba.cosine || ab.skl != ba.skl;
    const auto sc = verify::alignment_stats(as, bs);
    for (std::size_t l = 0; l < layers; ++l) {
      worst_scale = std::max(worst_scale, std::fabs(sc.cosine[l] - ab.cosine[l]));
      violations += ab.skl[l] < 0 || ab.cosine[l] < -1 || ab.cosine[l] > 1;
    }
  }
  return {violations == 0 && worst_scale <= 1e-12,
          fmt("%d random multi-layer map sets: Cos(a,a)=1 and SKL(a,a)=0 exact, exact symmetry, range checks; "
              "%zu violations; max cosine change under positive scaling %.2e (<= 1e-12)",
              cases, violations, worst_scale)};
}

// 11
Outcome locality(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t mcp_local = 0, hmoe_nonlocal = 0, xattn_nonlocal = 0;
  const int configs = 20;
  for (int c = 0; c < configs; ++c) {
    bench::FusionConfig cfg;
    cfg.n_tokens = 2 + rng.next_u64() % 15;
    cfg.heads_per_expert = 1 + rng.next_u64() % 3;
    cfg.d_model = cfg.heads_per_expert * (4 + rng.next_u64() % 6);
    cfg.n_experts = 1 + rng.next_u64() % 6;
    cfg.expert_rank = 1 + rng.next_u64() % 3;
    cfg.proj_rank = 1 + rng.next_u64() % 4;
    const std::uint64_t s = rng.next_u64();
    mcp_local += bench::locality_check(bench::Variant::mcp, cfg, s).local();
    hmoe_nonlocal += !bench::locality_check(bench::Variant::hmoe, cfg, s).local();
    xattn_nonlocal += !bench::locality_check(bench::Variant::xattn, cfg, s).local();
  }
  return {mcp_local == configs && hmoe_nonlocal == configs && xattn_nonlocal == configs,
          fmt("%d random configs: mcp local on %zu, hmoe non-local on %zu, xattn non-local on %zu", configs, mcp_local,
              hmoe_nonlocal, xattn_nonlocal)};
}

std::uint64_t seed_from_env() {
  const char* s = std::getenv("MMFUSE_SEED");
  return s && *s ? std::strtoull(s, nullptr, 10) : 42;
}

}  // namespace

int main(int argc, char** argv) {
  const std::uint64_t seed = seed_from_env();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle equivalence", [&] { return oracle_equivalence(seed); }},
      {"gradient correctness", [&] { return gradient_correctness(seed); }},
      {"AMG algebraic identities", [&] { return amg_identities(seed); }},
      {"stochasticity invariants", [&] { return stochasticity(seed); }},
      {"LoRA merge equivalence", [&] { return merge_equivalence(seed); }},
      {"parameter-budget audit", [] { return parameter_budget(); }},
      {"complexity scaling", [&] { return complexity_scaling(seed); }},
      {"MAC insensitivity to heads", [] { return mac_insensitivity(); }},
      {"function-preserving initialization", [&] { return function_preserving(seed); }},
      {"alignment-metric correctness", [&] { return alignment_metrics(seed); }},
      {"locality discrimination", [&] { return locality(seed); }},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::strtoul(argv[i], nullptr, 10));

  std::printf("acceptance, seed %llu\n", static_cast<unsigned long long>(seed));
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%-4s criterion %2zu  %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
