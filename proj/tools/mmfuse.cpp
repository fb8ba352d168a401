// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmfuse/bench/harness.hpp"
#include "mmfuse/encoder.hpp"
#include "mmfuse/tensor_io.hpp"
#include "mmfuse/verify/alignment.hpp"
#include "mmfuse/verify/gradcheck.hpp"
#include "mmfuse/verify/oracle.hpp"

namespace {

using nlohmann::json;
using namespace mmfuse;

constexpr std::uint64_t kDefaultSeed = 42;

std::uint64_t seed_from_env() {
  const char* s = std::getenv("MMFUSE_SEED");
  if (!s || !*s) return kDefaultSeed;
  char* end = nullptr;
  const auto v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("MMFUSE_SEED is not an unsigned integer: '") + s + "'");
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("'" + item + "' is not a positive integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

// Line-delimited JSON to a file or stdout.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw FormatError("cannot open " + path + " for writing");
    }
  }
  std::ostream& out() { return file_ ? *file_ : std::cout; }
  void line(const json& j) { out() << j.dump() << '\n'; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

EncoderConfig load_config(const std::string& path) {
  if (path.empty()) return EncoderConfig{};
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config " + path);
  try {
    json j;
    is >> j;
    return j.get<EncoderConfig>();
  } catch (const json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
}

bench::TimingProtocol protocol(std::size_t warmup, std::size_t iterations) {
  bench::TimingProtocol p;
  p.warmup = warmup;
  p.iterations = iterations;
  p.validate();
  return p;
}

// ---- subcommands -------------------------------------------------------------

struct BenchArgs {
  std::string variant = "hmoe";
  std::string n_list = "128,256,512,1024";
  std::size_t d = 768, experts = 8, heads = 2, rank = 4, proj_rank = 8;
  std::size_t warmup = 5, iterations = 30;
  std::string out;
};

int run_bench(const BenchArgs& a) {
  const auto seed = seed_from_env();
  bench::FusionConfig cfg;
  cfg.d_model = a.d;
  cfg.n_experts = a.experts;
  cfg.heads_per_expert = a.heads;
  cfg.expert_rank = a.rank;
  cfg.proj_rank = a.proj_rank;
  Sink sink(a.out);
  std::vector<bench::Variant> variants;
  for (const auto& v : split_list(a.variant)) variants.push_back(bench::parse_variant(v));
  for (const auto v : variants) {
    const auto res = bench::bench_scaling(v, parse_sizes(a.n_list), cfg, protocol(a.warmup, a.iterations), seed);
    for (const auto& r : res.reports) sink.line(r);
    sink.line({{"summary", bench::variant_name(v)},
               {"loglog_slope", res.slope},
               {"reliable", res.reliable},
               {"note", "module-level f32 single-thread timings; not calibrated against full-model FPS"}});
  }
  return 0;
}

struct SweepArgs {
  std::string axis, values, config, out, format = "text";
  bool no_timing = false;
  std::size_t warmup = 5, iterations = 30;
};

int run_sweep(const SweepArgs& a) {
  bench::SweepOptions opt;
  opt.seed = seed_from_env();
  opt.timing = !a.no_timing;
  opt.protocol = protocol(a.warmup, a.iterations);
  const auto table = bench::sweep(bench::parse_axis(a.axis), split_list(a.values), load_config(a.config), opt);
  Sink sink(a.out);
  if (a.format == "jsonl") {
    for (const auto& r : table.rows) sink.line({{"axis", bench::axis_name(table.axis)}, {"row", r}});
    sink.line({{"footer", table.footer}});
  } else if (a.format == "csv") {
    sink.out() << "value,ok,params,amg_lora_params,hmoe_params,macs,median_s,iqr_s\n";
    for (const auto& r : table.rows) {
      sink.out() << r.value << ',' << r.ok << ',' << r.params << ',' << r.amg_params << ',' << r.hmoe_params << ','
                 << r.macs << ',' << (r.timed ? std::to_string(r.timing.median) : "") << ','
                 << (r.timed ? std::to_string(r.timing.iqr()) : "") << '\n';
    }
  } else {
    sink.out() << bench::sweep_text(table);
  }
  for (const auto& r : table.rows) {
    if (!r.ok) return 1;
  }
  return 0;
}

int run_audit(const std::string& config, const std::string& format, const std::string& out) {
  const auto report = bench::audit(load_config(config));
  Sink sink(out);
  if (format == "text" || format == "both") sink.out() << bench::audit_text(report);
  if (format == "json" || format == "both") sink.line(report);
  return 0;
}

int run_gradcheck(const std::string& module, std::size_t configs, const std::string& out) {
  const auto reports = verify::run_gradcheck_suite(module, configs, seed_from_env());
  Sink sink(out);
  std::size_t failed = 0;
  for (const auto& r : reports) {
    sink.line(r);
    failed += r.pass ? 0 : 1;
  }
  sink.line({{"summary", "gradcheck"}, {"checks", reports.size()}, {"failed", failed}});
  return failed == 0 ? 0 : 1;
}

int run_oracle(std::size_t configs, const std::string& out) {
  const auto reports = verify::run_oracle_suite(configs, seed_from_env());
  Sink sink(out);
  std::size_t failed = 0;
  double worst = 0;
  for (const auto& r : reports) {
    sink.line(r);
    failed += r.pass ? 0 : 1;
    worst = std::max(worst, r.max_abs_diff);
  }
  sink.line({{"summary", "oracle"}, {"checks", reports.size()}, {"failed", failed}, {"max_abs_diff", worst}});
  return failed == 0 ? 0 : 1;
}

Tensor<double> stack_maps(const std::vector<MapPair<double>>& maps, bool rgb) {
  const auto& first = rgb ? maps.front().rgb : maps.front().x;
  Shape shape{maps.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  std::vector<double> data;
  data.reserve(maps.size() * first.size());
  for (const auto& m : maps) {
    const auto& t = rgb ? m.rgb : m.x;
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor<double>(shape, std::move(data));
}

int run_make_demo(const std::string& config, const std::string& ckpt, const std::string& tokens) {
  auto cfg = config.empty() ? EncoderConfig::toy(4, 16, 2, 4, 9) : load_config(config);
  Rng rng(seed_from_env());
  const auto weights = EncoderWeights<double>::init(cfg, rng);
  save_checkpoint(ckpt, weights);
  io::TensorArchive ar;
  ar.put("h_rgb", uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0));
  ar.put("h_x", uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0));
  ar.save(tokens);
  std::cout << json{{"checkpoint", ckpt}, {"tokens", tokens}, {"config", cfg}}.dump() << '\n';
  return 0;
}

int run_demo_forward(const std::string& ckpt, const std::string& in, const std::string& out_dir) {
  const auto weights = load_checkpoint<double>(ckpt);
  const auto tokens = io::TensorArchive::load(in);
  const auto& cfg = weights.config;
  const DualStream<double> stream{tokens.get<double>("h_rgb"), tokens.get<double>("h_x"), cfg.n_z, cfg.n_c};
  const auto res = encoder_forward(weights, stream);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  io::save_tensor(dir / "fused.bin", res.fused);
  io::save_tensor(dir / "maps_rgb.bin", stack_maps(res.maps, true));
  io::save_tensor(dir / "maps_x.bin", stack_maps(res.maps, false));
  io::TensorArchive ar;
  ar.put("fused", res.fused);
  for (std::size_t l = 0; l < res.maps.size(); ++l) {
    ar.put("layer" + std::to_string(l) + ".maps_rgb", res.maps[l].rgb);
    ar.put("layer" + std::to_string(l) + ".maps_x", res.maps[l].x);
  }
  ar.save(dir / "outputs.mmfk");
  std::cout << json{{"fused", (dir / "fused.bin").string()},
                    {"fused_shape", res.fused.shape()},
                    {"maps_rgb", (dir / "maps_rgb.bin").string()},
                    {"maps_x", (dir / "maps_x.bin").string()},
                    {"archive", (dir / "outputs.mmfk").string()},
                    {"layers", res.maps.size()}}
                   .dump()
            << '\n';
  return 0;
}

std::vector<Tensor<double>> read_map_layers(const std::string& path) {
  const auto t = io::load_tensor<double>(path);
  if (t.rank() == 3) return {t};
  if (t.rank() != 4) throw DimensionError(path + ": expected [heads x N x N] or [layers x heads x N x N]");
  std::vector<Tensor<double>> layers;
  const std::size_t plane = t.dim(1) * t.dim(2) * t.dim(3);
  for (std::size_t l = 0; l < t.dim(0); ++l) {
    layers.emplace_back(Shape{t.dim(1), t.dim(2), t.dim(3)},
                        std::vector<double>(t.raw() + l * plane, t.raw() + (l + 1) * plane));
  }
  return layers;
}

int run_align_metrics(const std::string& rgb, const std::string& x, const std::string& out) {
  const auto stats = verify::alignment_stats(read_map_layers(rgb), read_map_layers(x));
  Sink sink(out);
  json j = stats;
  j["metadata"] = {{"input", "pre-softmax maps; SKL uses their row softmax"},
                   {"skl_clamp", verify::kSklClamp},
                   {"skl_scale", 1.0},
                   {"note", "SKL is unscaled; multiply by 1e4 to compare with tables that scale it"}};
  sink.line(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmfuse: dual-stream fusion modules, oracles, benchmarks and audits"};
  app.require_subcommand(1);
  int code = 0;

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time fusion operators over token counts and fit the scaling slope");
  bench->add_option("--variant", ba.variant, "hmoe, xattn or mcp (comma list allowed)")->capture_default_str();
  bench->add_option("--n", ba.n_list, "token counts per stream, strictly increasing")->capture_default_str();
  bench->add_option("--d", ba.d, "model width")->capture_default_str();
  bench->add_option("--experts", ba.experts, "HMoE experts")->capture_default_str();
  bench->add_option("--heads", ba.heads, "HMoE heads per expert")->capture_default_str();
  bench->add_option("--rank", ba.rank, "HMoE expert rank")->capture_default_str();
  bench->add_option("--proj-rank", ba.proj_rank, "xattn / mcp bottleneck rank")->capture_default_str();
  bench->add_option("--warmup", ba.warmup, "warmup calls (>= 5)")->capture_default_str();
  bench->add_option("--iterations", ba.iterations, "timed samples (>= 30)")->capture_default_str();
  bench->add_option("--out", ba.out, "JSONL output file (default stdout)");
  bench->callback([&] { code = run_bench(ba); });

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "parameter / MAC / timing table over one configuration axis");
  sweep->add_option("--axis", sa.axis, "heads, experts, lora_rank, hmoe_rank, w_init, weight_type")->required();
  sweep->add_option("--values", sa.values, "comma list; experts accepts attn/ffn pairs like 4/8")->required();
  sweep->add_option("--config", sa.config, "base encoder config JSON (default: full-size defaults)");
  sweep->add_flag("--no-timing", sa.no_timing, "skip wall-clock timing");
  sweep->add_option("--format", sa.format, "text, jsonl or csv")->capture_default_str();
  sweep->add_option("--warmup", sa.warmup, "warmup calls (>= 5)")->capture_default_str();
  sweep->add_option("--iterations", sa.iterations, "timed samples (>= 30)")->capture_default_str();
  sweep->add_option("--out", sa.out, "output file (default stdout)");
  sweep->callback([&] { code = run_sweep(sa); });

  std::string audit_cfg, audit_format = "both", audit_out;
  auto* audit = app.add_subcommand("audit", "learnable / frozen parameter and MAC report");
  audit->add_option("--config", audit_cfg, "encoder config JSON (default: full-size defaults)");
  audit->add_option("--format", audit_format, "text, json or both")->capture_default_str();
  audit->add_option("--out", audit_out, "output file (default stdout)");
  audit->callback([&] { code = run_audit(audit_cfg, audit_format, audit_out); });

  std::string gc_module = "all", gc_out;
  std::size_t gc_configs = 10;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every trainable parameter class");
  gradcheck->add_option("--module", gc_module, "attention, hmoe, encoder or all")->capture_default_str();
  gradcheck->add_option("--configs", gc_configs, "random configurations per module")->capture_default_str();
  gradcheck->add_option("--out", gc_out, "JSONL output file (default stdout)");
  gradcheck->callback([&] { code = run_gradcheck(gc_module, gc_configs, gc_out); });

  std::size_t or_configs = 100;
  std::string or_out;
  auto* oracle = app.add_subcommand("oracle", "vectorized forward vs scalar-loop oracles on random configs");
  oracle->add_option("--configs", or_configs, "random configurations per module")->capture_default_str();
  oracle->add_option("--out", or_out, "JSONL output file (default stdout)");
  oracle->callback([&] { code = run_oracle(or_configs, or_out); });

  std::string md_config, md_ckpt = "demo_ckpt", md_tokens = "tokens.bin";
  auto* make_demo = app.add_subcommand("make-demo", "write a random checkpoint and a token pair for demo-forward");
  make_demo->add_option("--config", md_config, "encoder config JSON (default: small toy encoder)");
  make_demo->add_option("--ckpt", md_ckpt, "checkpoint directory")->capture_default_str();
  make_demo->add_option("--tokens", md_tokens, "token archive path")->capture_default_str();
  make_demo->callback([&] { code = run_make_demo(md_config, md_ckpt, md_tokens); });

  std::string df_ckpt, df_in, df_out = "demo_out";
  auto* demo = app.add_subcommand("demo-forward", "run the encoder on a token pair from a checkpoint");
  demo->add_option("--ckpt", df_ckpt, "checkpoint directory")->required();
  demo->add_option("--in", df_in, "token archive with h_rgb and h_x")->required();
  demo->add_option("--out", df_out, "output directory")->capture_default_str();
  demo->callback([&] { code = run_demo_forward(df_ckpt, df_in, df_out); });

  std::string am_rgb, am_x, am_out;
  auto* align = app.add_subcommand("align-metrics", "cosine and symmetric KL between two streams' attention maps");
  align->add_option("--rgb", am_rgb, "pre-softmax maps, [heads x N x N] or [layers x heads x N x N]")->required();
  align->add_option("--x", am_x, "maps of the other stream, same shape")->required();
  align->add_option("--out", am_out, "output file (default stdout)");
  align->callback([&] { code = run_align_metrics(am_rgb, am_x, am_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const mmfuse::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return code;
}
