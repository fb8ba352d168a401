// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mmfuse/attention.hpp"
#include "mmfuse/encoder.hpp"
#include "mmfuse/hmoe.hpp"
#include "mmfuse/rng.hpp"

namespace mmfuse::verify {

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& theta,
                                double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  Tensor<double> grad(theta.shape());
  Tensor<double> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + eps;
    const double up = f(probe);
    probe[i] = theta[i] - eps;
    const double down = f(probe);
    probe[i] = theta[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: objective is not finite at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = {{"name", r.name},
       {"config", r.config},
       {"fingerprint", r.fingerprint},
       {"error", r.max_rel_error},
       {"tolerance", r.tolerance},
       {"pass", r.pass}};
}

namespace {

std::string fingerprint(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double half_sq(const Tensor<double>& t) {
  double s = 0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return 0.5 * s;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.next_u64() % (hi - lo + 1));
}

// One parameter tensor inside a model copy, with its analytic gradient.
template <typename Model>
struct Slot {
  std::function<Tensor<double>(const Model&)> get;
  std::function<void(Model&, const Tensor<double>&)> set;
  Tensor<double> analytic;
};

template <typename Model>
double slot_error(const Model& base, const Slot<Model>& slot, const std::function<double(const Model&)>& loss) {
  const auto f = [&](const Tensor<double>& theta) {
    Model m = base;
    slot.set(m, theta);
    return loss(m);
  };
  const auto numeric = finite_diff_grad(f, slot.get(base));
  if (numeric.shape() != slot.analytic.shape()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    worst = std::max(worst, relative_error(slot.analytic[i], numeric[i]));
  }
  return worst;
}

template <typename Model>
GradCheckReport class_report(const std::string& name, const Model& base, const std::vector<Slot<Model>>& slots,
                             const std::function<double(const Model&)>& loss, const nlohmann::json& config) {
  GradCheckReport r;
  r.name = name;
  r.config = config;
  r.fingerprint = fingerprint(config);
  for (const auto& s : slots) r.max_rel_error = std::max(r.max_rel_error, slot_error(base, s, loss));
  r.pass = r.max_rel_error < r.tolerance;
  return r;
}

template <typename Model, typename Field>
Slot<Model> field_slot(Field field, Tensor<double> analytic) {
  return {[field](const Model& m) { return field(const_cast<Model&>(m)); },
          [field](Model& m, const Tensor<double>& t) { field(m) = t; }, std::move(analytic)};
}

template <typename Model, typename Field>
Slot<Model> scalar_slot(Field field, double analytic) {
  return {[field](const Model& m) { return Tensor<double>::scalar(field(const_cast<Model&>(m))); },
          [field](Model& m, const Tensor<double>& t) { field(m) = t[0]; }, Tensor<double>::scalar(analytic)};
}

// ---- attention ------------------------------------------------------------

struct AttnModel {
  AlignedAttentionLayer<double> layer;
  DualStream<double> s;
};

double attn_loss(const AttnModel& m) {
  const auto r = attention_forward(m.layer, m.s);
  return half_sq(r.out_rgb) + half_sq(r.out_x);
}

// ---- hmoe -----------------------------------------------------------------

struct HmoeModel {
  HmoeLayer<double> layer;
  Tensor<double> x;
};

double hmoe_loss(const HmoeModel& m) { return half_sq(hmoe_forward(m.layer, m.x).y_out); }

template <typename Model, typename Get>
std::vector<GradCheckReport> hmoe_classes(const std::string& prefix, const Model& base, Get layer_of,
                                          const HmoeLayer<double>& g, const std::function<double(const Model&)>& loss,
                                          const nlohmann::json& config) {
  using S = Slot<Model>;
  std::vector<GradCheckReport> out;
  out.push_back(class_report<Model>(prefix + "phi", base,
                                    {field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).phi; },
                                                       g.phi)},
                                    loss, config));
  std::vector<S> ea, eb;
  for (std::size_t i = 0; i < g.experts.size(); ++i) {
    ea.push_back(field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).experts[i].a; },
                                   g.experts[i].a));
    eb.push_back(field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).experts[i].b; },
                                   g.experts[i].b));
  }
  out.push_back(class_report<Model>(prefix + "expert.a", base, ea, loss, config));
  out.push_back(class_report<Model>(prefix + "expert.b", base, eb, loss, config));
  out.push_back(class_report<Model>(
      prefix + "pre.a", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).pre.a; }, g.pre.a)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "pre.b", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).pre.b; }, g.pre.b)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "post.a", base,
      {field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).post.a; }, g.post.a)}, loss, config));
  out.push_back(class_report<Model>(
      prefix + "post.b", base,
      {field_slot<Model>([=](Model& m) -> Tensor<double>& { return layer_of(m).post.b; }, g.post.b)}, loss, config));
  return out;
}

template <typename Model, typename Get>
std::vector<GradCheckReport> lora_classes(const std::string& prefix, const Model& base, Get lora_of,
                                          const LoraFactors<double>& g, const Guidance<double>& gw,
                                          const std::function<double(const Model&)>& loss,
                                          const nlohmann::json& config) {
  std::vector<GradCheckReport> out;
  out.push_back(class_report<Model>(
      prefix + "ak", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return lora_of(m).lora.ak; }, g.ak)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "bk", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return lora_of(m).lora.bk; }, g.bk)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "av", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return lora_of(m).lora.av; }, g.av)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "bv", base, {field_slot<Model>([=](Model& m) -> Tensor<double>& { return lora_of(m).lora.bv; }, g.bv)},
      loss, config));
  out.push_back(class_report<Model>(
      prefix + "w_x", base,
      {scalar_slot<Model>([=](Model& m) -> double& { return lora_of(m).guidance.w_x; }, gw.w_x)}, loss, config));
  out.push_back(class_report<Model>(
      prefix + "w_rgb", base,
      {scalar_slot<Model>([=](Model& m) -> double& { return lora_of(m).guidance.w_rgb; }, gw.w_rgb)}, loss, config));
  return out;
}

}  // namespace

std::vector<GradCheckReport> gradcheck_attention(std::uint64_t seed) {
  Rng rng(seed);
  AttentionConfig cfg;
  cfg.d_model = pick(rng, 0, 1) ? 8 : 4;
  cfg.n_heads = pick(rng, 1, 2);
  cfg.rank = pick(rng, 1, 2);
  cfg.scale_mode = pick(rng, 0, 1) ? ScaleMode::per_head : ScaleMode::full_dim;
  const std::size_t n_z = pick(rng, 1, 2), n_c = pick(rng, 2, 3);

  AttnModel base;
  base.layer = AlignedAttentionLayer<double>::init(cfg, rng);
  base.layer.lora.bk = xavier_init<double>(rng, base.layer.lora.bk.shape());
  base.layer.lora.bv = xavier_init<double>(rng, base.layer.lora.bv.shape());
  base.layer.guidance = {rng.uniform(-0.25, 1.25), rng.uniform(-0.25, 1.25)};
  base.s = {uniform_tensor<double>(rng, {n_z + n_c, cfg.d_model}, -1.0, 1.0),
            uniform_tensor<double>(rng, {n_z + n_c, cfg.d_model}, -1.0, 1.0), n_z, n_c};

  const auto fwd = attention_forward(base.layer, base.s);
  const auto g = attention_backward(base.layer, fwd.cache, fwd.out_rgb, fwd.out_x);

  nlohmann::json config = cfg;
  config["n_z"] = n_z;
  config["n_c"] = n_c;
  config["seed"] = seed;
  const std::function<double(const AttnModel&)> loss = attn_loss;
  auto out = lora_classes<AttnModel>("attention.", base, [](AttnModel& m) -> AlignedAttentionLayer<double>& { return m.layer; },
                                     g.lora, g.guidance, loss, config);
  out.push_back(class_report<AttnModel>(
      "attention.h_rgb", base, {field_slot<AttnModel>([](AttnModel& m) -> Tensor<double>& { return m.s.h_rgb; }, g.h_rgb)},
      loss, config));
  out.push_back(class_report<AttnModel>(
      "attention.h_x", base, {field_slot<AttnModel>([](AttnModel& m) -> Tensor<double>& { return m.s.h_x; }, g.h_x)}, loss,
      config));
  return out;
}

std::vector<GradCheckReport> gradcheck_hmoe(std::uint64_t seed) {
  Rng rng(seed);
  HmoeConfig cfg;
  cfg.heads_per_expert = pick(rng, 1, 2);
  cfg.d_model = pick(rng, 0, 1) ? 8 : 4;
  cfg.n_experts = pick(rng, 1, 3);
  cfg.expert_rank = pick(rng, 1, std::min<std::size_t>(2, cfg.sub_dim() - 1));
  cfg.patch_agg = pick(rng, 0, 1) ? PatchAgg::sum : PatchAgg::mean;
  const std::size_t n = pick(rng, 2, 4);

  HmoeModel base{HmoeLayer<double>::init_dense(cfg, rng), uniform_tensor<double>(rng, {n, cfg.d_model}, -1.0, 1.0)};
  const auto fwd = hmoe_forward(base.layer, base.x);
  const auto g = hmoe_backward(base.layer, fwd.cache, fwd.y_out);

  HmoeLayer<double> gl;
  gl.config = cfg;
  gl.phi = g.phi;
  gl.experts = g.experts;
  gl.pre = g.pre;
  gl.post = g.post;
  nlohmann::json config = cfg;
  config["n_tokens"] = n;
  config["seed"] = seed;
  const std::function<double(const HmoeModel&)> loss = hmoe_loss;
  auto out = hmoe_classes<HmoeModel>("hmoe.", base, [](HmoeModel& m) -> HmoeLayer<double>& { return m.layer; }, gl, loss,
                                     config);
  out.push_back(class_report<HmoeModel>(
      "hmoe.x_in", base, {field_slot<HmoeModel>([](HmoeModel& m) -> Tensor<double>& { return m.x; }, g.x_in)}, loss,
      config));
  return out;
}

namespace {

struct EncModel {
  EncoderWeights<double> w;
  DualStream<double> s;
};

double enc_loss(const EncModel& m) { return half_sq(encoder_forward(m.w, m.s).fused); }

}  // namespace

std::vector<GradCheckReport> gradcheck_encoder(std::uint64_t seed) {
  Rng rng(seed);
  auto cfg = EncoderConfig::toy(2, 8, 2, pick(rng, 1, 2), pick(rng, 2, 3));
  cfg.ffn_hidden = 12;
  cfg.w_init = rng.uniform(0.0, 1.0);
  EncModel base{EncoderWeights<double>::init_dense(cfg, rng), {}};
  base.s = {uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0),
            uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0), cfg.n_z, cfg.n_c};
  const auto fwd = encoder_forward(base.w, base.s);
  const auto g = encoder_backward(base.w, fwd.cache, base.s, fwd.fused);

  nlohmann::json config = cfg;
  config["seed"] = seed;
  const std::function<double(const EncModel&)> loss = enc_loss;
  std::vector<GradCheckReport> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!g.adapters[l]) continue;
    const auto& ga = *g.adapters[l];
    const auto p = "encoder.layer" + std::to_string(l) + ".";
    auto adapter_of = [l](EncModel& m) -> Adapter<double>& { return *m.w.adapters[l]; };
    for (auto& r : lora_classes<EncModel>(p + "attn.", base, adapter_of, ga.lora, ga.guidance, loss, config)) {
      out.push_back(std::move(r));
    }
    for (auto& r : hmoe_classes<EncModel>(p + "hmoe_attn.", base,
                                          [l](EncModel& m) -> HmoeLayer<double>& { return m.w.adapters[l]->hmoe_attn; },
                                          ga.hmoe_attn, loss, config)) {
      out.push_back(std::move(r));
    }
    for (auto& r : hmoe_classes<EncModel>(p + "hmoe_ffn.", base,
                                          [l](EncModel& m) -> HmoeLayer<double>& { return m.w.adapters[l]->hmoe_ffn; },
                                          ga.hmoe_ffn, loss, config)) {
      out.push_back(std::move(r));
    }
  }
  out.push_back(class_report<EncModel>(
      "encoder.h_rgb", base, {field_slot<EncModel>([](EncModel& m) -> Tensor<double>& { return m.s.h_rgb; }, g.h_rgb)},
      loss, config));
  out.push_back(class_report<EncModel>(
      "encoder.h_x", base, {field_slot<EncModel>([](EncModel& m) -> Tensor<double>& { return m.s.h_x; }, g.h_x)}, loss,
      config));
  return out;
}

std::vector<GradCheckReport> run_gradcheck_suite(const std::string& module, std::size_t n_configs,
                                                 std::uint64_t seed) {
  if (module != "all" && module != "attention" && module != "hmoe" && module != "encoder") {
    throw ConfigError("gradcheck: unknown module '" + module + "' (attention, hmoe, encoder, all)");
  }
  Rng root(seed);
  std::vector<GradCheckReport> out;
  auto run = [&](std::uint64_t stream_id, auto fn, std::size_t count) {
    Rng stream = root.fork(stream_id);
    for (std::size_t i = 0; i < count; ++i) {
      for (auto& r : fn(stream.next_u64())) out.push_back(std::move(r));
    }
  };
  if (module == "all" || module == "attention") run(1, gradcheck_attention, n_configs);
  if (module == "all" || module == "hmoe") run(2, gradcheck_hmoe, n_configs);
  if (module == "all" || module == "encoder") run(3, gradcheck_encoder, std::max<std::size_t>(1, n_configs / 5));
  return out;
}

}  // namespace mmfuse::verify
