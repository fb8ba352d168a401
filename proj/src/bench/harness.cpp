// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/bench/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <set>
#include <sstream>

#include "mmfuse/kernels.hpp"
#include "mmfuse/ops.hpp"

namespace mmfuse::bench {

using Clock = std::chrono::steady_clock;

void TimingProtocol::validate() const {
  if (warmup < 5) throw ConfigError("timing: at least 5 warmup iterations required");
  if (iterations < 30) throw ConfigError("timing: at least 30 timed iterations required");
  if (!(min_sample_seconds > 0) || max_inner == 0) throw ConfigError("timing: bad sample widening limits");
}

double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw ConfigError("quantile: empty sample");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

namespace {

double run_seconds(const std::function<void()>& fn, std::size_t reps) {
  const auto t0 = Clock::now();
  for (std::size_t i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// RAII pin to one OpenMP thread for the duration of a timing run.
class SingleThread {
 public:
  SingleThread() : saved_(kernels::max_threads()) { kernels::set_num_threads(1); }
  ~SingleThread() { kernels::set_num_threads(saved_); }
  SingleThread(const SingleThread&) = delete;
  SingleThread& operator=(const SingleThread&) = delete;

 private:
  int saved_;
};

}  // namespace

Timing time_callable(const std::function<void()>& fn, const TimingProtocol& protocol) {
  protocol.validate();
  for (std::size_t i = 0; i < protocol.warmup; ++i) fn();

  Timing t;
  while (run_seconds(fn, t.inner) < protocol.min_sample_seconds) {
    if (t.inner >= protocol.max_inner) {
      t.reliable = false;
      break;
    }
    t.inner *= 2;
  }
  std::vector<double> samples;
  samples.reserve(protocol.iterations);
  for (std::size_t i = 0; i < protocol.iterations; ++i) {
    samples.push_back(run_seconds(fn, t.inner) / static_cast<double>(t.inner));
  }
  t.iterations = samples.size();
  t.median = quantile(samples, 0.5);
  t.q1 = quantile(samples, 0.25);
  t.q3 = quantile(samples, 0.75);
  t.min = *std::min_element(samples.begin(), samples.end());
  t.max = *std::max_element(samples.begin(), samples.end());
  return t;
}

void to_json(nlohmann::json& j, const FusionConfig& c) {
  j = {{"N", c.n_tokens},       {"D", c.d_model},        {"e", c.n_experts},
       {"h", c.heads_per_expert}, {"r", c.expert_rank}, {"proj_rank", c.proj_rank}};
}

void to_json(nlohmann::json& j, const BenchReport& r) {
  j = {{"op", r.op},
       {"config", r.config},
       {"macs", r.macs},
       {"params", r.params},
       {"median_s", r.timing.median},
       {"iqr_s", r.timing.iqr()},
       {"q1_s", r.timing.q1},
       {"q3_s", r.timing.q3},
       {"min_s", r.timing.min},
       {"max_s", r.timing.max},
       {"iterations", r.timing.iterations},
       {"warmup", r.warmup},
       {"inner_reps", r.timing.inner},
       {"reliable", r.timing.reliable},
       {"dtype", "f32"},
       {"threads", r.threads},
       {"timestamp", r.timestamp},
       {"seed", r.seed}};
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("loglog_slope: need >= 2 paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw NumericError("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw NumericError("loglog_slope: x values are all equal");
  return sxy / sxx;
}

ScalingResult bench_scaling(Variant variant, const std::vector<std::size_t>& n_list, const FusionConfig& base,
                            const TimingProtocol& protocol, std::uint64_t seed) {
  if (n_list.size() < 3) throw ConfigError("bench: need at least 3 token counts");
  for (std::size_t i = 1; i < n_list.size(); ++i) {
    if (n_list[i] <= n_list[i - 1]) throw ConfigError("bench: token counts must be strictly increasing");
  }
  protocol.validate();
  const SingleThread pin;
  ScalingResult out;
  std::vector<double> xs, ys;
  Rng root(seed);
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    FusionConfig cfg = base;
    cfg.n_tokens = n_list[i];
    Rng rng = root.fork(i);
    const FusionComparator<float> op(variant, cfg, rng);
    const auto a = uniform_tensor<float>(rng, {cfg.n_tokens, cfg.d_model}, -1.0, 1.0);
    const auto b = uniform_tensor<float>(rng, {cfg.n_tokens, cfg.d_model}, -1.0, 1.0);
    volatile float sink = 0;
    const auto timing = time_callable(
        [&] {
          const auto r = op.forward(a, b);
          sink = sink + r.a[0];
        },
        protocol);
    BenchReport rep;
    rep.op = variant_name(variant);
    rep.config = cfg;
    rep.macs = op.mac_count();
    rep.params = op.param_count();
    rep.timing = timing;
    rep.warmup = protocol.warmup;
    rep.timestamp = utc_timestamp();
    rep.seed = seed;
    rep.threads = 1;
    out.reliable = out.reliable && timing.reliable;
    xs.push_back(static_cast<double>(cfg.n_tokens));
    ys.push_back(timing.median);
    out.reports.push_back(std::move(rep));
  }
  out.slope = loglog_slope(xs, ys);
  return out;
}

// ---- sweep -----------------------------------------------------------------

SweepAxis parse_axis(const std::string& name) {
  if (name == "heads") return SweepAxis::heads;
  if (name == "experts") return SweepAxis::experts;
  if (name == "lora_rank") return SweepAxis::lora_rank;
  if (name == "hmoe_rank") return SweepAxis::hmoe_rank;
  if (name == "w_init") return SweepAxis::w_init;
  if (name == "weight_type") return SweepAxis::weight_type;
  throw ConfigError("unknown sweep axis '" + name + "' (heads, experts, lora_rank, hmoe_rank, w_init, weight_type)");
}

std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::heads:
      return "heads";
    case SweepAxis::experts:
      return "experts";
    case SweepAxis::lora_rank:
      return "lora_rank";
    case SweepAxis::hmoe_rank:
      return "hmoe_rank";
    case SweepAxis::w_init:
      return "w_init";
    case SweepAxis::weight_type:
      return "weight_type";
  }
  return "?";
}

namespace {

std::size_t parse_count(const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("'" + s + "' is not an integer");
  }
  if (pos != s.size() || v <= 0) throw ConfigError("'" + s + "' is not a positive integer");
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("'" + s + "' is not a number");
  }
  if (pos != s.size() || !std::isfinite(v)) throw ConfigError("'" + s + "' is not a finite number");
  return v;
}

std::string guidance_mode(double w) {
  if (w == 0.0) return "none";
  if (w == 1.0) return "cross";
  if (w == 0.5) return "mean";
  return "custom";
}

Timing time_hmoe_blocks(const EncoderConfig& cfg, const SweepOptions& opt) {
  Rng rng(opt.seed);
  const auto attn = HmoeLayer<float>::init_dense(cfg.hmoe_attn, rng);
  const auto ffn = HmoeLayer<float>::init_dense(cfg.hmoe_ffn, rng);
  const auto x = uniform_tensor<float>(rng, {2 * cfg.n_c, cfg.d_model}, -1.0, 1.0);
  volatile float sink = 0;
  return time_callable(
      [&] {
        sink = sink + hmoe_forward(attn, x).y_out[0];
        sink = sink + hmoe_forward(ffn, x).y_out[0];
      },
      opt.protocol);
}

Timing time_attention(const EncoderConfig& cfg, const SweepOptions& opt) {
  Rng rng(opt.seed);
  auto layer = AlignedAttentionLayer<float>::init(cfg.attention_config(), rng);
  const auto a = uniform_tensor<float>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0);
  const auto b = uniform_tensor<float>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0);
  volatile float sink = 0;
  return time_callable(
      [&] { sink = sink + dual_attention_forward(layer.frozen, &layer.lora, layer.guidance, a, b).out_rgb[0]; },
      opt.protocol);
}

SweepRow sweep_row(SweepAxis axis, const std::string& value, const EncoderConfig& base, const SweepOptions& opt) {
  SweepRow row;
  row.value = value;
  EncoderConfig cfg = base;
  bool hmoe_axis = false;
  bool lora_implemented = true;
  std::size_t lora_targets = 2;
  switch (axis) {
    case SweepAxis::heads:
      cfg.hmoe_attn.heads_per_expert = cfg.hmoe_ffn.heads_per_expert = parse_count(value);
      hmoe_axis = true;
      break;
    case SweepAxis::experts: {
      const auto slash = value.find('/');
      if (slash == std::string::npos) {
        cfg.hmoe_attn.n_experts = cfg.hmoe_ffn.n_experts = parse_count(value);
      } else {
        cfg.hmoe_attn.n_experts = parse_count(value.substr(0, slash));
        cfg.hmoe_ffn.n_experts = parse_count(value.substr(slash + 1));
      }
      row.descriptor = {{"attn_experts", cfg.hmoe_attn.n_experts}, {"ffn_experts", cfg.hmoe_ffn.n_experts}};
      hmoe_axis = true;
      break;
    }
    case SweepAxis::hmoe_rank:
      cfg.hmoe_attn.expert_rank = cfg.hmoe_ffn.expert_rank = parse_count(value);
      hmoe_axis = true;
      break;
    case SweepAxis::lora_rank:
      cfg.lora_rank = parse_count(value);
      break;
    case SweepAxis::w_init: {
      cfg.w_init = parse_real(value);
      row.descriptor = {{"w_x", cfg.w_init},
                        {"w_rgb", cfg.w_init},
                        {"guidance", guidance_mode(cfg.w_init)},
                        {"aligned_rgb", "S~_rgb + w_x (S~_x - S~_rgb)"},
                        {"aligned_x", "S~_x + w_rgb (S~_rgb - S~_x)"}};
      break;
    }
    case SweepAxis::weight_type: {
      std::set<char> letters;
      for (char ch : value) {
        if (ch != 'q' && ch != 'k' && ch != 'v') throw ConfigError("weight_type '" + value + "' must use q, k, v");
        if (!letters.insert(ch).second) throw ConfigError("weight_type '" + value + "' repeats a projection");
      }
      if (letters.empty()) throw ConfigError("weight_type must name at least one projection");
      lora_targets = letters.size();
      lora_implemented = letters == std::set<char>{'k', 'v'};
      nlohmann::json targets = nlohmann::json::array();
      for (char ch : letters) targets.push_back(std::string("W_") + ch);
      row.descriptor = {{"lora_targets", targets}, {"implemented", lora_implemented}};
      if (!lora_implemented) row.descriptor["note"] = "structural count only; the forward path adapts W_k and W_v";
      break;
    }
  }
  cfg.validate();
  const auto p = encoder_param_report(cfg);
  const auto m = encoder_mac_count(cfg);
  const std::size_t per_target = cfg.n_inserted() * 2 * cfg.d_model * cfg.lora_rank;
  row.amg_params = cfg.n_inserted() * 2 + lora_targets * per_target;
  row.hmoe_params = p.hmoe;
  row.params = row.amg_params + row.hmoe_params;
  row.macs = m.total - m.lora + m.lora / 2 * lora_targets;
  if (opt.timing && lora_implemented) {
    row.timing = hmoe_axis ? time_hmoe_blocks(cfg, opt) : time_attention(cfg, opt);
    row.timed = true;
  }
  row.ok = true;
  return row;
}

std::string with_commas(std::uint64_t v) {
  auto s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

}  // namespace

SweepTable sweep(SweepAxis axis, const std::vector<std::string>& values, const EncoderConfig& base,
                 const SweepOptions& options) {
  if (options.timing) options.protocol.validate();
  SweepTable t;
  t.axis = axis;
  for (const auto& v : values) {
    try {
      t.rows.push_back(sweep_row(axis, v, base, options));
    } catch (const Error& e) {
      SweepRow row;
      row.value = v;
      row.error = e.what();
      t.rows.push_back(std::move(row));
    }
  }
  t.footer =
      "Tracking-quality columns need training and are not reproduced. Wall times are single-thread f32 medians "
      "of the module the axis changes, measured on this machine; they give direction only and are not "
      "calibrated against full-tracker FPS.";
  return t;
}

void to_json(nlohmann::json& j, const SweepRow& r) {
  j = {{"value", r.value}, {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
    return;
  }
  j["params"] = r.params;
  j["amg_lora_params"] = r.amg_params;
  j["hmoe_params"] = r.hmoe_params;
  j["macs"] = r.macs;
  if (r.timed) {
    j["median_s"] = r.timing.median;
    j["iqr_s"] = r.timing.iqr();
    j["iterations"] = r.timing.iterations;
    j["reliable"] = r.timing.reliable;
  }
  if (!r.descriptor.is_null()) j["descriptor"] = r.descriptor;
}

void to_json(nlohmann::json& j, const SweepTable& t) {
  j = {{"axis", axis_name(t.axis)}, {"rows", t.rows}, {"footer", t.footer}};
}

std::string sweep_text(const SweepTable& t) {
  std::ostringstream os;
  os << std::left << std::setw(10) << axis_name(t.axis) << std::right << std::setw(12) << "learnable"
     << std::setw(12) << "amg_lora" << std::setw(10) << "hmoe" << std::setw(12) << "GMACs" << std::setw(12)
     << "median_ms" << std::setw(10) << "iqr_ms" << '\n';
  for (const auto& r : t.rows) {
    os << std::left << std::setw(10) << r.value << std::right;
    if (!r.ok) {
      os << "  error: " << r.error << '\n';
      continue;
    }
    os << std::setw(12) << with_commas(r.params) << std::setw(12) << with_commas(r.amg_params) << std::setw(10)
       << with_commas(r.hmoe_params) << std::setw(12) << std::fixed << std::setprecision(3)
       << static_cast<double>(r.macs) * 1e-9;
    if (r.timed) {
      os << std::setw(12) << std::setprecision(3) << r.timing.median * 1e3 << std::setw(10) << r.timing.iqr() * 1e3;
    } else {
      os << std::setw(12) << "-" << std::setw(10) << "-";
    }
    os << '\n';
  }
  os << t.footer << '\n';
  return os.str();
}

// ---- audit -----------------------------------------------------------------

AuditReport audit(const EncoderConfig& config) {
  AuditReport a;
  a.config = config;
  a.params = encoder_param_report(config);
  a.macs = encoder_mac_count(config);
  return a;
}

namespace {

nlohmann::json delta(std::size_t count, double reference) {
  return {{"count", count},
          {"reference", reference},
          {"delta", static_cast<double>(count) - reference},
          {"relative", (static_cast<double>(count) - reference) / reference}};
}

}  // namespace

void to_json(nlohmann::json& j, const AuditReport& a) {
  j = {{"config", a.config},
       {"params", a.params},
       {"macs", a.macs},
       {"reference",
        {{"amg_lora", delta(a.params.amg_lora, a.reference.amg_lora)},
         {"hmoe", delta(a.params.hmoe, a.reference.hmoe)},
         {"total", delta(a.params.learnable, a.reference.total)}}},
       {"merged", {{"amg_lora_learnable", a.params.merged_amg}}}};
}

std::string audit_text(const AuditReport& a) {
  std::ostringstream os;
  auto line = [&](const std::string& name, std::size_t count, double ref) {
    os << std::left << std::setw(18) << name << std::right << std::setw(12) << with_commas(count) << std::setw(10)
       << std::fixed << std::setprecision(3) << static_cast<double>(count) * 1e-6 << "M" << std::setw(9)
       << std::setprecision(2) << ref * 1e-6 << "M" << std::setw(10) << std::showpos << std::setprecision(1)
       << 100.0 * (static_cast<double>(count) - ref) / ref << "%" << std::noshowpos << '\n';
  };
  os << std::left << std::setw(18) << "component" << std::right << std::setw(12) << "count" << std::setw(11)
     << "millions" << std::setw(10) << "ref" << std::setw(11) << "delta" << '\n';
  line("AMG-LoRA", a.params.amg_lora, a.reference.amg_lora);
  line("HMoE", a.params.hmoe, a.reference.hmoe);
  line("learnable total", a.params.learnable, a.reference.total);
  os << std::left << std::setw(18) << "frozen" << std::right << std::setw(12) << with_commas(a.params.frozen) << '\n';
  os << "HMoE per layer: attention-side " << with_commas(a.params.hmoe_attn_block) << ", FFN-side "
     << with_commas(a.params.hmoe_ffn_block) << " (" << a.params.inserted_layers << " inserted layers)\n";
  os << "AMG-LoRA learnable after merging: " << a.params.merged_amg << " (2 guidance scalars per inserted layer)\n";
  os << "MACs per two-stream forward (N=" << a.config.n_tokens() << " per stream): frozen "
     << with_commas(a.macs.frozen) << ", LoRA " << with_commas(a.macs.lora) << ", HMoE " << with_commas(a.macs.hmoe)
     << ", total " << with_commas(a.macs.total) << '\n';
  return os.str();
}

}  // namespace mmfuse::bench
