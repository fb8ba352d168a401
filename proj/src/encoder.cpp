// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/encoder.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "mmfuse/ops.hpp"
#include "mmfuse/tensor_io.hpp"

namespace mmfuse {

// ---- config ---------------------------------------------------------------

AttentionConfig EncoderConfig::attention_config() const {
  AttentionConfig a;
  a.d_model = d_model;
  a.n_heads = n_heads;
  a.rank = lora_rank;
  a.w_init = w_init;
  a.scale_mode = scale_mode;
  return a;
}

void EncoderConfig::validate() const {
  if (n_layers == 0) throw ConfigError("encoder: n_layers must be positive");
  if (insert_every > n_layers) {
    throw ConfigError("encoder: insert_every " + std::to_string(insert_every) + " exceeds n_layers " +
                      std::to_string(n_layers));
  }
  if (n_z == 0 || n_c == 0) throw ConfigError("encoder: n_z and n_c must be positive");
  attention_config().validate();
  for (const auto* h : {&hmoe_attn, &hmoe_ffn}) {
    h->validate();
    if (h->d_model != d_model) {
      throw ConfigError("encoder: HMoE d_model " + std::to_string(h->d_model) + " != encoder d_model " +
                        std::to_string(d_model));
    }
  }
}

EncoderConfig EncoderConfig::toy(std::size_t n_layers, std::size_t d_model, std::size_t n_heads, std::size_t n_z,
                                 std::size_t n_c) {
  EncoderConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.lora_rank = std::min<std::size_t>(2, d_model - 1);
  c.hmoe_attn = {d_model, 2, 2, 2, PatchAgg::sum};
  c.hmoe_ffn = {d_model, 2, 3, 2, PatchAgg::sum};
  c.n_z = n_z;
  c.n_c = n_c;
  return c;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"n_layers", c.n_layers},
       {"insert_every", c.insert_every},
       {"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"ffn_hidden", c.ffn_width()},
       {"lora_rank", c.lora_rank},
       {"hmoe_attn", c.hmoe_attn},
       {"hmoe_ffn", c.hmoe_ffn},
       {"n_z", c.n_z},
       {"n_c", c.n_c},
       {"w_init", c.w_init},
       {"scale_mode", c.scale_mode == ScaleMode::per_head ? "per_head" : "full_dim"}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.insert_every = j.value("insert_every", c.insert_every);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_hidden = j.value("ffn_hidden", std::size_t{0});
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.hmoe_attn.d_model = c.d_model;
  c.hmoe_ffn.d_model = c.d_model;
  if (j.contains("hmoe_attn")) j.at("hmoe_attn").get_to(c.hmoe_attn);
  if (j.contains("hmoe_ffn")) j.at("hmoe_ffn").get_to(c.hmoe_ffn);
  c.n_z = j.value("n_z", c.n_z);
  c.n_c = j.value("n_c", c.n_c);
  c.w_init = j.value("w_init", c.w_init);
  const auto mode = j.value("scale_mode", std::string("per_head"));
  if (mode == "per_head") {
    c.scale_mode = ScaleMode::per_head;
  } else if (mode == "full_dim") {
    c.scale_mode = ScaleMode::full_dim;
  } else {
    throw ConfigError("encoder: unknown scale_mode '" + mode + "'");
  }
}

// ---- weights --------------------------------------------------------------

template <typename T>
std::size_t FrozenBlock<T>::param_count() const {
  return ln1.gamma.size() + ln1.beta.size() + ln2.gamma.size() + ln2.beta.size() + attn.param_count() +
         ffn.w1.size() + ffn.b1.size() + ffn.w2.size() + ffn.b2.size();
}

namespace {

template <typename T>
FrozenBlock<T> random_block(const EncoderConfig& c, Rng& rng) {
  const std::size_t d = c.d_model, f = c.ffn_width();
  FrozenBlock<T> b;
  b.ln1 = {uniform_tensor<T>(rng, {d}, T(0.8), T(1.2)), uniform_tensor<T>(rng, {d}, T(-0.1), T(0.1))};
  b.ln2 = {uniform_tensor<T>(rng, {d}, T(0.8), T(1.2)), uniform_tensor<T>(rng, {d}, T(-0.1), T(0.1))};
  b.attn = FrozenAttention<T>::init(d, c.n_heads, c.scale_mode, rng);
  b.ffn.w1 = xavier_init<T>(rng, {d, f});
  b.ffn.b1 = uniform_tensor<T>(rng, {f}, T(-0.1), T(0.1));
  b.ffn.w2 = xavier_init<T>(rng, {f, d});
  b.ffn.b2 = uniform_tensor<T>(rng, {d}, T(-0.1), T(0.1));
  return b;
}

template <typename T>
EncoderWeights<T> build_weights(const EncoderConfig& config, Rng& rng, bool dense) {
  config.validate();
  EncoderWeights<T> w;
  w.config = config;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    w.blocks.push_back(random_block<T>(config, rng));
    if (!config.is_inserted(l)) {
      w.adapters.emplace_back();
      continue;
    }
    Adapter<T> a;
    a.lora = LoraFactors<T>::init(config.d_model, config.lora_rank, rng);
    a.guidance = {static_cast<T>(config.w_init), static_cast<T>(config.w_init)};
    if (dense) {
      a.lora.bk = xavier_init<T>(rng, a.lora.bk.shape());
      a.lora.bv = xavier_init<T>(rng, a.lora.bv.shape());
      a.hmoe_attn = HmoeLayer<T>::init_dense(config.hmoe_attn, rng);
      a.hmoe_ffn = HmoeLayer<T>::init_dense(config.hmoe_ffn, rng);
    } else {
      a.hmoe_attn = HmoeLayer<T>::init(config.hmoe_attn, rng);
      a.hmoe_ffn = HmoeLayer<T>::init(config.hmoe_ffn, rng);
    }
    w.adapters.push_back(std::move(a));
  }
  return w;
}

}  // namespace

template <typename T>
void EncoderWeights<T>::validate() const {
  config.validate();
  const std::size_t d = config.d_model, f = config.ffn_width();
  if (blocks.size() != config.n_layers || adapters.size() != config.n_layers) {
    throw ConfigError("encoder: weights hold " + std::to_string(blocks.size()) + " blocks for " +
                      std::to_string(config.n_layers) + " layers");
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto& b = blocks[l];
    b.attn.validate();
    if (b.attn.d_model() != d || b.attn.n_heads != config.n_heads) {
      throw ConfigError("encoder: layer " + std::to_string(l) + " attention geometry mismatch");
    }
    for (const auto* v : {&b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta, &b.ffn.b2}) {
      if (v->shape() != Shape{d}) throw ConfigError("encoder: layer " + std::to_string(l) + " norm/bias shape");
    }
    if (b.ffn.w1.shape() != Shape{d, f} || b.ffn.b1.shape() != Shape{f} || b.ffn.w2.shape() != Shape{f, d}) {
      throw ConfigError("encoder: layer " + std::to_string(l) + " FFN shape mismatch");
    }
    if (adapters[l].has_value() != config.is_inserted(l)) {
      throw ConfigError("encoder: layer " + std::to_string(l) + " adapter presence does not match insert_every");
    }
    if (adapters[l]) {
      adapters[l]->lora.validate(d);
      if (adapters[l]->lora.rank() != config.lora_rank) throw ConfigError("encoder: LoRA rank mismatch");
      adapters[l]->hmoe_attn.validate();
      adapters[l]->hmoe_ffn.validate();
    }
  }
}

template <typename T>
EncoderWeights<T> EncoderWeights<T>::init(const EncoderConfig& config, Rng& rng) {
  return build_weights<T>(config, rng, false);
}

template <typename T>
EncoderWeights<T> EncoderWeights<T>::init_dense(const EncoderConfig& config, Rng& rng) {
  return build_weights<T>(config, rng, true);
}

// ---- frozen sublayers -----------------------------------------------------

template <typename T>
T gelu(T z) {
  return T(0.5) * z * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
}

namespace {

template <typename T>
T gelu_grad(T z) {
  const T cdf = T(0.5) * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * z * z) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + z * pdf;
}

template <typename T>
Tensor<T> layer_norm_fwd(const LayerNormParams<T>& p, const Tensor<T>& x, LayerNormCache<T>* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  if (p.gamma.size() != d) throw DimensionError("layer_norm: width " + std::to_string(d) + " vs params");
  Tensor<T> y(x.shape()), x_hat(x.shape());
  std::vector<T> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.row_ptr(i);
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    inv[i] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      x_hat(i, j) = (row[j] - mean) * inv[i];
      y(i, j) = p.gamma[j] * x_hat(i, j) + p.beta[j];
    }
  }
  if (cache) *cache = {std::move(x_hat), std::move(inv)};
  return y;
}

template <typename T>
Tensor<T> layer_norm_bwd(const LayerNormParams<T>& p, const LayerNormCache<T>& c, const Tensor<T>& g) {
  const std::size_t n = g.rows(), d = g.cols();
  Tensor<T> dx(g.shape());
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_d = T(0), mean_dx = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      dxh[j] = g(i, j) * p.gamma[j];
      mean_d += dxh[j];
      mean_dx += dxh[j] * c.x_hat(i, j);
    }
    mean_d /= static_cast<T>(d);
    mean_dx /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) dx(i, j) = c.inv_std[i] * (dxh[j] - mean_d - c.x_hat(i, j) * mean_dx);
  }
  return dx;
}

template <typename T>
void add_row_bias(Tensor<T>& x, const Tensor<T>& b) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T* row = x.row_ptr(i);
    for (std::size_t j = 0; j < x.cols(); ++j) row[j] += b[j];
  }
}

template <typename T>
Tensor<T> ffn_fwd(const FeedForward<T>& f, const Tensor<T>& x, FfnCache<T>* cache) {
  auto pre = matmul(x, f.w1);
  add_row_bias(pre, f.b1);
  Tensor<T> act(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = gelu(pre[i]);
  auto out = matmul(act, f.w2);
  add_row_bias(out, f.b2);
  if (cache) *cache = {x, std::move(pre), std::move(act)};
  return out;
}

template <typename T>
Tensor<T> ffn_bwd(const FeedForward<T>& f, const FfnCache<T>& c, const Tensor<T>& g) {
  auto d_act = matmul_nt(g, f.w2);
  for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad(c.pre[i]);
  return matmul_nt(d_act, f.w1);
}

// Rows [begin, end) of both streams, stacked rgb first.
template <typename T>
Tensor<T> stack_rows(const Tensor<T>& a, const Tensor<T>& b, std::size_t begin, std::size_t end) {
  return concat(std::vector<Tensor<T>>{slice_rows(a, begin, end), slice_rows(b, begin, end)}, 0);
}

template <typename T>
void scatter_rows(Tensor<T>& a, Tensor<T>& b, std::size_t begin, const Tensor<T>& stacked) {
  const std::size_t n = stacked.rows() / 2, d = stacked.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* ra = a.row_ptr(begin + i);
    T* rb = b.row_ptr(begin + i);
    const T* sa = stacked.row_ptr(i);
    const T* sb = stacked.row_ptr(n + i);
    for (std::size_t j = 0; j < d; ++j) {
      ra[j] += sa[j];
      rb[j] += sb[j];
    }
  }
}

template <typename T>
void hmoe_residual(const HmoeLayer<T>& layer, Tensor<T>& h_rgb, Tensor<T>& h_x, std::size_t begin,
                   std::size_t end, HmoeCache<T>& cache) {
  auto res = hmoe_forward(layer, stack_rows(h_rgb, h_x, begin, end));
  scatter_rows(h_rgb, h_x, begin, res.y_out);
  cache = std::move(res.cache);
}

template <typename T>
void accumulate(HmoeLayer<T>& acc, const HmoeGrads<T>& g) {
  add_into(acc.phi, g.phi);
  for (std::size_t i = 0; i < acc.experts.size(); ++i) {
    add_into(acc.experts[i].a, g.experts[i].a);
    add_into(acc.experts[i].b, g.experts[i].b);
  }
  add_into(acc.pre.a, g.pre.a);
  add_into(acc.pre.b, g.pre.b);
  add_into(acc.post.a, g.post.a);
  add_into(acc.post.b, g.post.b);
}

// Backward of h += hmoe(rows of both streams); dh carries through the residual.
template <typename T>
void hmoe_residual_backward(const HmoeLayer<T>& layer, const HmoeCache<T>& cache, Tensor<T>& dh_rgb,
                            Tensor<T>& dh_x, std::size_t begin, std::size_t end, HmoeLayer<T>& acc) {
  const auto g = hmoe_backward(layer, cache, stack_rows(dh_rgb, dh_x, begin, end));
  accumulate(acc, g);
  scatter_rows(dh_rgb, dh_x, begin, g.x_in);
}

template <typename T>
void check_stream(const EncoderConfig& c, const DualStream<T>& s) {
  s.validate(c.d_model);
  if (s.n_z != c.n_z || s.n_c != c.n_c) {
    throw ConfigError("encoder: stream has n_z=" + std::to_string(s.n_z) + ", n_c=" + std::to_string(s.n_c) +
                      " but config expects " + std::to_string(c.n_z) + ", " + std::to_string(c.n_c));
  }
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const LayerNormParams<T>& p, const Tensor<T>& x) {
  return layer_norm_fwd<T>(p, x, nullptr);
}

template <typename T>
Tensor<T> feed_forward(const FeedForward<T>& f, const Tensor<T>& x) {
  return ffn_fwd<T>(f, x, nullptr);
}

// ---- forward / backward ---------------------------------------------------

template <typename T>
EncoderOutput<T> encoder_forward(const EncoderWeights<T>& weights, const DualStream<T>& stream) {
  weights.validate();
  const auto& cfg = weights.config;
  check_stream(cfg, stream);
  const std::size_t nz = cfg.n_z, n = cfg.n_tokens();

  EncoderOutput<T> out;
  Tensor<T> h_rgb = stream.h_rgb, h_x = stream.h_x;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& blk = weights.blocks[l];
    LayerCache<T> lc;
    lc.inserted = cfg.is_inserted(l);
    const auto a_rgb = layer_norm_fwd(blk.ln1, h_rgb, &lc.rgb.ln1);
    const auto a_x = layer_norm_fwd(blk.ln1, h_x, &lc.x.ln1);
    if (lc.inserted) {
      const auto& ad = *weights.adapters[l];
      auto att = dual_attention_forward(blk.attn, &ad.lora, ad.guidance, a_rgb, a_x);
      add_into(h_rgb, att.out_rgb);
      add_into(h_x, att.out_x);
      out.maps.push_back(std::move(att.maps));
      lc.dual_attn = std::move(att.cache);
      hmoe_residual(ad.hmoe_attn, h_rgb, h_x, 0, nz, lc.attn_z);
      hmoe_residual(ad.hmoe_attn, h_rgb, h_x, nz, n, lc.attn_c);
    } else {
      auto att_rgb = self_attention_forward(blk.attn, a_rgb);
      auto att_x = self_attention_forward(blk.attn, a_x);
      add_into(h_rgb, att_rgb.out_rgb);
      add_into(h_x, att_x.out_rgb);
      out.maps.push_back({std::move(att_rgb.maps.rgb), std::move(att_x.maps.rgb)});
      lc.rgb.self_attn = std::move(att_rgb.cache);
      lc.x.self_attn = std::move(att_x.cache);
    }
    const auto b_rgb = layer_norm_fwd(blk.ln2, h_rgb, &lc.rgb.ln2);
    const auto b_x = layer_norm_fwd(blk.ln2, h_x, &lc.x.ln2);
    add_into(h_rgb, ffn_fwd(blk.ffn, b_rgb, &lc.rgb.ffn));
    add_into(h_x, ffn_fwd(blk.ffn, b_x, &lc.x.ffn));
    if (lc.inserted) {
      const auto& ad = *weights.adapters[l];
      hmoe_residual(ad.hmoe_ffn, h_rgb, h_x, 0, nz, lc.ffn_z);
      hmoe_residual(ad.hmoe_ffn, h_rgb, h_x, nz, n, lc.ffn_c);
    }
    out.cache.layers.push_back(std::move(lc));
  }
  out.fused = add(slice_rows(h_rgb, nz, n), slice_rows(h_x, nz, n));
  out.h_rgb = std::move(h_rgb);
  out.h_x = std::move(h_x);
  return out;
}

template <typename T>
Tensor<T> frozen_tower_forward(const EncoderWeights<T>& weights, const Tensor<T>& h_in) {
  weights.validate();
  if (h_in.rank() != 2 || h_in.cols() != weights.config.d_model) {
    throw DimensionError("frozen_tower_forward: tokens " + shape_str(h_in.shape()));
  }
  Tensor<T> h = h_in;
  for (const auto& blk : weights.blocks) {
    add_into(h, self_attention_forward(blk.attn, layer_norm(blk.ln1, h)).out_rgb);
    add_into(h, feed_forward(blk.ffn, layer_norm(blk.ln2, h)));
  }
  return h;
}

template <typename T>
EncoderGrads<T> encoder_backward(const EncoderWeights<T>& weights, const EncoderCache<T>& cache,
                                 const DualStream<T>& stream, const Tensor<T>& grad_fused) {
  const auto& cfg = weights.config;
  check_stream(cfg, stream);
  if (cache.layers.size() != cfg.n_layers) throw StateError("encoder_backward: cache layer count mismatch");
  if (grad_fused.shape() != Shape{cfg.n_c, cfg.d_model}) {
    throw DimensionError("encoder_backward: grad " + shape_str(grad_fused.shape()) + " vs fused [" +
                         std::to_string(cfg.n_c) + "x" + std::to_string(cfg.d_model) + "]");
  }
  const std::size_t nz = cfg.n_z, n = cfg.n_tokens(), d = cfg.d_model;

  EncoderGrads<T> grads;
  grads.adapters.resize(cfg.n_layers);
  Tensor<T> dh_rgb({n, d}), dh_x({n, d});
  for (std::size_t i = 0; i < cfg.n_c; ++i) {
    std::copy_n(grad_fused.row_ptr(i), d, dh_rgb.row_ptr(nz + i));
    std::copy_n(grad_fused.row_ptr(i), d, dh_x.row_ptr(nz + i));
  }

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& blk = weights.blocks[l];
    const auto& lc = cache.layers[l];
    if (lc.inserted != cfg.is_inserted(l)) throw StateError("encoder_backward: cache layout mismatch");
    Adapter<T>* acc = nullptr;
    if (lc.inserted) {
      const auto& ad = *weights.adapters[l];
      grads.adapters[l] = Adapter<T>{LoraFactors<T>::zeros_like(ad.lora), Guidance<T>{T(0), T(0)},
                                     HmoeLayer<T>::zeros_like(ad.hmoe_attn), HmoeLayer<T>::zeros_like(ad.hmoe_ffn)};
      acc = &*grads.adapters[l];
      hmoe_residual_backward(ad.hmoe_ffn, lc.ffn_c, dh_rgb, dh_x, nz, n, acc->hmoe_ffn);
      hmoe_residual_backward(ad.hmoe_ffn, lc.ffn_z, dh_rgb, dh_x, 0, nz, acc->hmoe_ffn);
    }
    add_into(dh_rgb, layer_norm_bwd(blk.ln2, lc.rgb.ln2, ffn_bwd(blk.ffn, lc.rgb.ffn, dh_rgb)));
    add_into(dh_x, layer_norm_bwd(blk.ln2, lc.x.ln2, ffn_bwd(blk.ffn, lc.x.ffn, dh_x)));
    if (lc.inserted) {
      const auto& ad = *weights.adapters[l];
      hmoe_residual_backward(ad.hmoe_attn, lc.attn_c, dh_rgb, dh_x, nz, n, acc->hmoe_attn);
      hmoe_residual_backward(ad.hmoe_attn, lc.attn_z, dh_rgb, dh_x, 0, nz, acc->hmoe_attn);
      const auto ag = dual_attention_backward(blk.attn, &ad.lora, lc.dual_attn, dh_rgb, dh_x);
      acc->lora = ag.lora;
      acc->guidance = ag.guidance;
      add_into(dh_rgb, layer_norm_bwd(blk.ln1, lc.rgb.ln1, ag.h_rgb));
      add_into(dh_x, layer_norm_bwd(blk.ln1, lc.x.ln1, ag.h_x));
    } else {
      const auto g_rgb = self_attention_backward(blk.attn, lc.rgb.self_attn, dh_rgb);
      const auto g_x = self_attention_backward(blk.attn, lc.x.self_attn, dh_x);
      add_into(dh_rgb, layer_norm_bwd(blk.ln1, lc.rgb.ln1, g_rgb));
      add_into(dh_x, layer_norm_bwd(blk.ln1, lc.x.ln1, g_x));
    }
  }
  grads.h_rgb = std::move(dh_rgb);
  grads.h_x = std::move(dh_x);
  return grads;
}

// ---- counting -------------------------------------------------------------

ParamReport encoder_param_report(const EncoderConfig& c) {
  c.validate();
  ParamReport r;
  const std::size_t d = c.d_model, f = c.ffn_width();
  r.inserted_layers = c.n_inserted();
  r.hmoe_attn_block = hmoe_param_count(c.hmoe_attn);
  r.hmoe_ffn_block = hmoe_param_count(c.hmoe_ffn);
  r.amg_lora = r.inserted_layers * amg_lora_param_count(d, c.lora_rank);
  r.hmoe = r.inserted_layers * (r.hmoe_attn_block + r.hmoe_ffn_block);
  r.learnable = r.amg_lora + r.hmoe;
  r.merged_amg = r.inserted_layers * 2;
  r.frozen = c.n_layers * (3 * d * d + 2 * d * f + f + d + 4 * d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (!c.is_inserted(l)) continue;
    const auto p = "layer" + std::to_string(l);
    r.trainable.push_back(p + ".attn.{ak,bk,av,bv,w_x,w_rgb}");
    r.trainable.push_back(p + ".hmoe_attn.*");
    r.trainable.push_back(p + ".hmoe_ffn.*");
  }
  return r;
}

void to_json(nlohmann::json& j, const ParamReport& r) {
  j = {{"amg_lora", r.amg_lora},
       {"hmoe", r.hmoe},
       {"hmoe_attn_block", r.hmoe_attn_block},
       {"hmoe_ffn_block", r.hmoe_ffn_block},
       {"learnable", r.learnable},
       {"frozen", r.frozen},
       {"merged_amg", r.merged_amg},
       {"inserted_layers", r.inserted_layers},
       {"trainable", r.trainable}};
}

MacReport encoder_mac_count(const EncoderConfig& c) {
  c.validate();
  const std::uint64_t n = c.n_tokens(), d = c.d_model, f = c.ffn_width(), r = c.lora_rank;
  const std::uint64_t per_stream_layer = 3 * n * d * d + 2 * n * n * d + 2 * n * d * f;
  MacReport m;
  m.frozen = 2 * c.n_layers * per_stream_layer;
  m.lora = 2 * c.n_inserted() * (4 * n * d * r);
  std::uint64_t per_layer_hmoe = 0;
  for (const auto* h : {&c.hmoe_attn, &c.hmoe_ffn}) {
    per_layer_hmoe += hmoe_mac_count(*h, 2 * c.n_z) + hmoe_mac_count(*h, 2 * c.n_c);
  }
  m.hmoe = c.n_inserted() * per_layer_hmoe;
  m.total = m.frozen + m.lora + m.hmoe;
  return m;
}

void to_json(nlohmann::json& j, const MacReport& m) {
  j = {{"frozen", m.frozen}, {"lora", m.lora}, {"hmoe", m.hmoe}, {"total", m.total}};
}

// ---- checkpoints ----------------------------------------------------------

namespace {

template <typename T>
void put_hmoe(io::TensorArchive& ar, const std::string& p, const HmoeLayer<T>& h) {
  ar.put(p + "phi", h.phi);
  for (std::size_t i = 0; i < h.experts.size(); ++i) {
    ar.put(p + "expert" + std::to_string(i) + ".a", h.experts[i].a);
    ar.put(p + "expert" + std::to_string(i) + ".b", h.experts[i].b);
  }
  ar.put(p + "pre.a", h.pre.a);
  ar.put(p + "pre.b", h.pre.b);
  ar.put(p + "post.a", h.post.a);
  ar.put(p + "post.b", h.post.b);
}

template <typename T>
HmoeLayer<T> get_hmoe(const io::TensorArchive& ar, const std::string& p, const HmoeConfig& c) {
  HmoeLayer<T> h;
  h.config = c;
  h.phi = ar.get<T>(p + "phi");
  for (std::size_t i = 0; i < c.n_experts; ++i) {
    h.experts.push_back({ar.get<T>(p + "expert" + std::to_string(i) + ".a"),
                         ar.get<T>(p + "expert" + std::to_string(i) + ".b")});
  }
  h.pre = {ar.get<T>(p + "pre.a"), ar.get<T>(p + "pre.b")};
  h.post = {ar.get<T>(p + "post.a"), ar.get<T>(p + "post.b")};
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const EncoderWeights<T>& w) {
  w.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "config.json");
    if (!os) throw FormatError("checkpoint: cannot write " + (dir / "config.json").string());
    os << nlohmann::json(w.config).dump(2) << '\n';
  }
  io::TensorArchive ar;
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    const auto& b = w.blocks[l];
    ar.put(p + "ln1.gamma", b.ln1.gamma);
    ar.put(p + "ln1.beta", b.ln1.beta);
    ar.put(p + "ln2.gamma", b.ln2.gamma);
    ar.put(p + "ln2.beta", b.ln2.beta);
    ar.put(p + "attn.wq", b.attn.wq);
    ar.put(p + "attn.wk", b.attn.wk);
    ar.put(p + "attn.wv", b.attn.wv);
    ar.put(p + "ffn.w1", b.ffn.w1);
    ar.put(p + "ffn.b1", b.ffn.b1);
    ar.put(p + "ffn.w2", b.ffn.w2);
    ar.put(p + "ffn.b2", b.ffn.b2);
    if (!w.adapters[l]) continue;
    const auto& a = *w.adapters[l];
    ar.put(p + "attn.ak", a.lora.ak);
    ar.put(p + "attn.bk", a.lora.bk);
    ar.put(p + "attn.av", a.lora.av);
    ar.put(p + "attn.bv", a.lora.bv);
    ar.put(p + "attn.w_x", Tensor<T>::scalar(a.guidance.w_x));
    ar.put(p + "attn.w_rgb", Tensor<T>::scalar(a.guidance.w_rgb));
    put_hmoe(ar, p + "hmoe_attn.", a.hmoe_attn);
    put_hmoe(ar, p + "hmoe_ffn.", a.hmoe_ffn);
  }
  ar.save(dir / "weights.mmfk");
}

template <typename T>
EncoderWeights<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.json");
  if (!is) throw FormatError("checkpoint: missing " + (dir / "config.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config.json: ") + e.what());
  }
  EncoderWeights<T> w;
  try {
    w.config = j.get<EncoderConfig>();
    w.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
  }
  const auto ar = io::TensorArchive::load(dir / "weights.mmfk");
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    FrozenBlock<T> b;
    b.ln1 = {ar.get<T>(p + "ln1.gamma"), ar.get<T>(p + "ln1.beta")};
    b.ln2 = {ar.get<T>(p + "ln2.gamma"), ar.get<T>(p + "ln2.beta")};
    b.attn.wq = ar.get<T>(p + "attn.wq");
    b.attn.wk = ar.get<T>(p + "attn.wk");
    b.attn.wv = ar.get<T>(p + "attn.wv");
    b.attn.n_heads = w.config.n_heads;
    b.attn.scale_mode = w.config.scale_mode;
    b.ffn = {ar.get<T>(p + "ffn.w1"), ar.get<T>(p + "ffn.b1"), ar.get<T>(p + "ffn.w2"), ar.get<T>(p + "ffn.b2")};
    w.blocks.push_back(std::move(b));
    if (!w.config.is_inserted(l)) {
      w.adapters.emplace_back();
      continue;
    }
    Adapter<T> a;
    a.lora = {ar.get<T>(p + "attn.ak"), ar.get<T>(p + "attn.bk"), ar.get<T>(p + "attn.av"), ar.get<T>(p + "attn.bv")};
    a.guidance = {ar.get<T>(p + "attn.w_x")[0], ar.get<T>(p + "attn.w_rgb")[0]};
    a.hmoe_attn = get_hmoe<T>(ar, p + "hmoe_attn.", w.config.hmoe_attn);
    a.hmoe_ffn = get_hmoe<T>(ar, p + "hmoe_ffn.", w.config.hmoe_ffn);
    w.adapters.push_back(std::move(a));
  }
  try {
    w.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return w;
}

#define MMFUSE_INSTANTIATE_ENCODER(T)                                                                   \
  template struct FrozenBlock<T>;                                                                       \
  template struct EncoderWeights<T>;                                                                    \
  template T gelu(T);                                                                                   \
  template Tensor<T> layer_norm(const LayerNormParams<T>&, const Tensor<T>&);                           \
  template Tensor<T> feed_forward(const FeedForward<T>&, const Tensor<T>&);                             \
  template EncoderOutput<T> encoder_forward(const EncoderWeights<T>&, const DualStream<T>&);            \
  template Tensor<T> frozen_tower_forward(const EncoderWeights<T>&, const Tensor<T>&);                  \
  template EncoderGrads<T> encoder_backward(const EncoderWeights<T>&, const EncoderCache<T>&,           \
                                            const DualStream<T>&, const Tensor<T>&);                    \
  template void save_checkpoint(const std::filesystem::path&, const EncoderWeights<T>&);                \
  template EncoderWeights<T> load_checkpoint(const std::filesystem::path&);

MMFUSE_INSTANTIATE_ENCODER(float)
MMFUSE_INSTANTIATE_ENCODER(double)

#undef MMFUSE_INSTANTIATE_ENCODER

}  // namespace mmfuse
