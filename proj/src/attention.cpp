// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/attention.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mmfuse/ops.hpp"

namespace mmfuse {

void AttentionConfig::validate() const {
  if (d_model == 0 || n_heads == 0) throw ConfigError("attention: d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (rank == 0 || rank >= d_model) {
    throw ConfigError("attention: LoRA rank must satisfy 1 <= r < d_model, got r=" + std::to_string(rank));
  }
  if (!std::isfinite(w_init)) throw ConfigError("attention: w_init must be finite");
}

void to_json(nlohmann::json& j, const AttentionConfig& c) {
  j = {{"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"rank", c.rank},
       {"w_init", c.w_init},
       {"scale_mode", c.scale_mode == ScaleMode::per_head ? "per_head" : "full_dim"}};
}

void from_json(const nlohmann::json& j, AttentionConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.rank = j.value("rank", c.rank);
  c.w_init = j.value("w_init", c.w_init);
  const auto mode = j.value("scale_mode", std::string("per_head"));
  if (mode == "per_head") {
    c.scale_mode = ScaleMode::per_head;
  } else if (mode == "full_dim") {
    c.scale_mode = ScaleMode::full_dim;
  } else {
    throw ConfigError("attention: unknown scale_mode '" + mode + "'");
  }
}

std::size_t amg_lora_param_count(std::size_t d_model, std::size_t rank) {
  return 2 * (d_model * rank + rank * d_model) + 2;
}

// ---- parameter containers -------------------------------------------------

template <typename T>
T FrozenAttention<T>::score_scale() const {
  const auto width = scale_mode == ScaleMode::per_head ? head_dim() : d_model();
  return T(1) / std::sqrt(static_cast<T>(width));
}

template <typename T>
void FrozenAttention<T>::validate() const {
  const auto d = d_model();
  if (d == 0) throw ConfigError("attention: frozen weights are empty");
  for (const auto* w : {&wq, &wk, &wv}) {
    if (w->shape() != Shape{d, d}) throw ConfigError("attention: projection must be D x D, got " + shape_str(w->shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d) + " not divisible by n_heads " + std::to_string(n_heads));
  }
}

template <typename T>
FrozenAttention<T> FrozenAttention<T>::init(std::size_t d_model, std::size_t n_heads, ScaleMode mode, Rng& rng) {
  FrozenAttention f;
  f.wq = xavier_init<T>(rng, {d_model, d_model});
  f.wk = xavier_init<T>(rng, {d_model, d_model});
  f.wv = xavier_init<T>(rng, {d_model, d_model});
  f.n_heads = n_heads;
  f.scale_mode = mode;
  f.validate();
  return f;
}

template <typename T>
void LoraFactors<T>::validate(std::size_t d_model) const {
  const auto r = rank();
  if (r == 0 || r >= d_model) throw ConfigError("LoRA rank must satisfy 1 <= r < d_model");
  if (ak.shape() != Shape{d_model, r} || av.shape() != Shape{d_model, r} || bk.shape() != Shape{r, d_model} ||
      bv.shape() != Shape{r, d_model}) {
    throw ConfigError("LoRA factor shapes inconsistent with d_model=" + std::to_string(d_model) +
                      ", r=" + std::to_string(r));
  }
}

template <typename T>
LoraFactors<T> LoraFactors<T>::init(std::size_t d_model, std::size_t rank, Rng& rng) {
  LoraFactors f;
  f.ak = xavier_init<T>(rng, {d_model, rank});
  f.bk = Tensor<T>({rank, d_model});
  f.av = xavier_init<T>(rng, {d_model, rank});
  f.bv = Tensor<T>({rank, d_model});
  return f;
}

template <typename T>
LoraFactors<T> LoraFactors<T>::zeros_like(const LoraFactors& other) {
  return {Tensor<T>(other.ak.shape()), Tensor<T>(other.bk.shape()), Tensor<T>(other.av.shape()),
          Tensor<T>(other.bv.shape())};
}

template <typename T>
void AlignedAttentionLayer<T>::validate() const {
  frozen.validate();
  lora.validate(frozen.d_model());
}

template <typename T>
AlignedAttentionLayer<T> AlignedAttentionLayer<T>::init(const AttentionConfig& config, Rng& rng) {
  config.validate();
  AlignedAttentionLayer layer;
  layer.frozen = FrozenAttention<T>::init(config.d_model, config.n_heads, config.scale_mode, rng);
  layer.lora = LoraFactors<T>::init(config.d_model, config.rank, rng);
  layer.guidance = {static_cast<T>(config.w_init), static_cast<T>(config.w_init)};
  return layer;
}

template <typename T>
void DualStream<T>::validate(std::size_t d_model) const {
  if (h_rgb.rank() != 2 || h_x.rank() != 2) throw DimensionError("dual stream: token tensors must be rank 2");
  if (h_rgb.shape() != h_x.shape()) {
    throw DimensionError("dual stream: modality shapes differ, " + shape_str(h_rgb.shape()) + " vs " +
                         shape_str(h_x.shape()));
  }
  if (h_rgb.cols() != d_model) {
    throw DimensionError("dual stream: token width " + std::to_string(h_rgb.cols()) + " != d_model " +
                         std::to_string(d_model));
  }
  if (n_z + n_c != h_rgb.rows()) {
    throw DimensionError("dual stream: n_z + n_c = " + std::to_string(n_z + n_c) + " but " +
                         std::to_string(h_rgb.rows()) + " tokens");
  }
}

// ---- head-wise building blocks --------------------------------------------

namespace {

template <typename T>
Tensor<T> head_plane(const Tensor<T>& maps, std::size_t head) {
  const std::size_t n = maps.dim(1);
  Tensor<T> out({n, n});
  std::copy_n(maps.raw() + head * n * n, n * n, out.raw());
  return out;
}

template <typename T>
void set_head_plane(Tensor<T>& maps, std::size_t head, const Tensor<T>& plane) {
  std::copy_n(plane.raw(), plane.size(), maps.raw() + head * plane.size());
}

template <typename T>
void set_cols(Tensor<T>& dst, std::size_t begin, const Tensor<T>& block) {
  for (std::size_t i = 0; i < dst.rows(); ++i) std::copy_n(block.row_ptr(i), block.cols(), dst.row_ptr(i) + begin);
}

template <typename T>
StreamCache<T> project(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora, const Tensor<T>& h) {
  StreamCache<T> c;
  c.h = h;
  c.q = matmul(h, frozen.wq);
  c.k = matmul(h, frozen.wk);
  c.v = matmul(h, frozen.wv);
  if (lora) {
    c.u_k = matmul(h, lora->ak);
    c.u_v = matmul(h, lora->av);
    add_into(c.k, matmul(c.u_k, lora->bk));
    add_into(c.v, matmul(c.u_v, lora->bv));
  }
  return c;
}

template <typename T>
Tensor<T> head_scores(const FrozenAttention<T>& frozen, const Tensor<T>& q, const Tensor<T>& k) {
  const std::size_t n = q.rows(), dh = frozen.head_dim();
  const T s = frozen.score_scale();
  Tensor<T> maps({frozen.n_heads, n, n});
  for (std::size_t h = 0; h < frozen.n_heads; ++h) {
    const auto qh = slice_cols(q, h * dh, (h + 1) * dh);
    const auto kh = slice_cols(k, h * dh, (h + 1) * dh);
    set_head_plane(maps, h, scale(matmul_nt(qh, kh), s));
  }
  return maps;
}

template <typename T>
Tensor<T> apply_heads(const FrozenAttention<T>& frozen, const Tensor<T>& probs, const Tensor<T>& v) {
  const std::size_t dh = frozen.head_dim();
  Tensor<T> out(v.shape());
  for (std::size_t h = 0; h < frozen.n_heads; ++h) {
    set_cols(out, h * dh, matmul(head_plane(probs, h), slice_cols(v, h * dh, (h + 1) * dh)));
  }
  return out;
}

// Gradient through out = concat_h(P_h V_h) and P = softmax_rows(S).
// Returns dS [heads x N x N]; writes dV.
template <typename T>
Tensor<T> softmax_value_backward(const FrozenAttention<T>& frozen, const StreamCache<T>& c, const Tensor<T>& g,
                                 Tensor<T>& dv) {
  const std::size_t n = c.h.rows(), dh = frozen.head_dim();
  Tensor<T> ds(c.probs.shape());
  dv = Tensor<T>(c.v.shape());
  for (std::size_t h = 0; h < frozen.n_heads; ++h) {
    const auto p = head_plane(c.probs, h);
    const auto gh = slice_cols(g, h * dh, (h + 1) * dh);
    set_cols(dv, h * dh, matmul_tn(p, gh));
    const auto dp = matmul_nt(gh, slice_cols(c.v, h * dh, (h + 1) * dh));
    Tensor<T> dsh({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      T inner = T(0);
      for (std::size_t j = 0; j < n; ++j) inner += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < n; ++j) dsh(i, j) = p(i, j) * (dp(i, j) - inner);
    }
    set_head_plane(ds, h, dsh);
  }
  return ds;
}

// Gradient through S~ = per-head Q K^T * scale and the projections. Returns dH
// and accumulates LoRA gradients when `lora` is set.
template <typename T>
Tensor<T> projection_backward(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora, const StreamCache<T>& c,
                              const Tensor<T>& ds_raw, const Tensor<T>& dv, LoraFactors<T>* lora_grad) {
  const std::size_t dh = frozen.head_dim();
  const T s = frozen.score_scale();
  Tensor<T> dq(c.q.shape()), dk(c.k.shape());
  for (std::size_t h = 0; h < frozen.n_heads; ++h) {
    const auto dsh = head_plane(ds_raw, h);
    const auto qh = slice_cols(c.q, h * dh, (h + 1) * dh);
    const auto kh = slice_cols(c.k, h * dh, (h + 1) * dh);
    set_cols(dq, h * dh, scale(matmul(dsh, kh), s));
    set_cols(dk, h * dh, scale(matmul_tn(dsh, qh), s));
  }
  auto dh_in = matmul_nt(dq, frozen.wq);
  add_into(dh_in, matmul_nt(dk, frozen.wk));
  add_into(dh_in, matmul_nt(dv, frozen.wv));
  if (lora) {
    // K = H W_k + U_k B_k with U_k = H A_k (same for V).
    add_into(lora_grad->bk, matmul_tn(c.u_k, dk));
    add_into(lora_grad->bv, matmul_tn(c.u_v, dv));
    const auto du_k = matmul_nt(dk, lora->bk);
    const auto du_v = matmul_nt(dv, lora->bv);
    add_into(lora_grad->ak, matmul_tn(c.h, du_k));
    add_into(lora_grad->av, matmul_tn(c.h, du_v));
    add_into(dh_in, matmul_nt(du_k, lora->ak));
    add_into(dh_in, matmul_nt(du_v, lora->av));
  }
  return dh_in;
}

template <typename T>
void check_cache(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora, const AttentionCache<T>& cache,
                 bool dual) {
  if (cache.dual != dual) throw StateError("attention: cache stream count does not match this backward");
  if (cache.d_model != frozen.d_model() || cache.n_heads != frozen.n_heads) {
    throw StateError("attention: cache was produced by a layer with a different geometry");
  }
  if (cache.rank != (lora ? lora->rank() : 0)) throw StateError("attention: cache LoRA rank mismatch");
  if (cache.rgb.h.empty() || (dual && cache.x.h.empty())) throw StateError("attention: empty cache");
}

}  // namespace

// ---- public operations ----------------------------------------------------

namespace {

// a + w (b - a), written so that w = 0, w = 1, w = 0.5 and a == b are exact
// and results stay inside [a, b] for w in [0, 1].
template <typename T>
T interpolate(T a, T b, T w) {
  if (a == b) return a;
  const T v = (T(1) - w) * a + w * b;
  if (w < T(0) || w > T(1)) return v;
  return std::clamp(v, std::min(a, b), std::max(a, b));
}

}  // namespace

template <typename T>
MapPair<T> amg_align(const Guidance<T>& guidance, const Tensor<T>& raw_rgb, const Tensor<T>& raw_x) {
  if (raw_rgb.shape() != raw_x.shape()) {
    throw DimensionError("amg_align: map shapes differ, " + shape_str(raw_rgb.shape()) + " vs " +
                         shape_str(raw_x.shape()));
  }
  MapPair<T> out{Tensor<T>(raw_rgb.shape()), Tensor<T>(raw_x.shape())};
  for (std::size_t i = 0; i < raw_rgb.size(); ++i) {
    const T r = raw_rgb[i], x = raw_x[i];
    out.rgb[i] = interpolate(r, x, guidance.w_x);
    out.x[i] = interpolate(x, r, guidance.w_rgb);
  }
  return out;
}

template <typename T>
MapPair<T> raw_attention_maps(const AlignedAttentionLayer<T>& layer, const DualStream<T>& stream) {
  layer.validate();
  stream.validate(layer.d_model());
  const auto rgb = project(layer.frozen, &layer.lora, stream.h_rgb);
  const auto x = project(layer.frozen, &layer.lora, stream.h_x);
  return {head_scores(layer.frozen, rgb.q, rgb.k), head_scores(layer.frozen, x.q, x.k)};
}

template <typename T>
AttentionResult<T> dual_attention_forward(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora,
                                          const Guidance<T>& guidance, const Tensor<T>& h_rgb,
                                          const Tensor<T>& h_x) {
  frozen.validate();
  if (lora) lora->validate(frozen.d_model());
  if (h_rgb.rank() != 2 || h_rgb.shape() != h_x.shape() || h_rgb.cols() != frozen.d_model()) {
    throw DimensionError("attention: streams " + shape_str(h_rgb.shape()) + " / " + shape_str(h_x.shape()) +
                         " incompatible with d_model " + std::to_string(frozen.d_model()));
  }

  AttentionResult<T> res;
  auto& cache = res.cache;
  cache.d_model = frozen.d_model();
  cache.n_heads = frozen.n_heads;
  cache.rank = lora ? lora->rank() : 0;
  cache.dual = true;
  cache.guidance = guidance;
  cache.rgb = project(frozen, lora, h_rgb);
  cache.x = project(frozen, lora, h_x);
  cache.rgb.raw = head_scores(frozen, cache.rgb.q, cache.rgb.k);
  cache.x.raw = head_scores(frozen, cache.x.q, cache.x.k);

  res.maps = amg_align(guidance, cache.rgb.raw, cache.x.raw);
  cache.rgb.probs = softmax(res.maps.rgb, 2);
  cache.x.probs = softmax(res.maps.x, 2);
  res.out_rgb = apply_heads(frozen, cache.rgb.probs, cache.rgb.v);
  res.out_x = apply_heads(frozen, cache.x.probs, cache.x.v);
  return res;
}

template <typename T>
AttentionResult<T> attention_forward(const AlignedAttentionLayer<T>& layer, const DualStream<T>& stream) {
  stream.validate(layer.d_model());
  return dual_attention_forward(layer.frozen, &layer.lora, layer.guidance, stream.h_rgb, stream.h_x);
}

template <typename T>
AttentionResult<T> attention_forward(const MergedAttentionLayer<T>& layer, const DualStream<T>& stream) {
  stream.validate(layer.merged.d_model());
  return dual_attention_forward<T>(layer.merged, nullptr, layer.guidance, stream.h_rgb, stream.h_x);
}

template <typename T>
AttentionGrads<T> dual_attention_backward(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora,
                                          const AttentionCache<T>& cache, const Tensor<T>& grad_out_rgb,
                                          const Tensor<T>& grad_out_x) {
  check_cache(frozen, lora, cache, true);
  if (grad_out_rgb.shape() != cache.rgb.h.shape() || grad_out_x.shape() != cache.x.h.shape()) {
    throw DimensionError("attention_backward: upstream gradient shape does not match forward output");
  }
  AttentionGrads<T> grads;
  if (lora) grads.lora = LoraFactors<T>::zeros_like(*lora);

  Tensor<T> dv_rgb, dv_x;
  const auto ds_rgb = softmax_value_backward(frozen, cache.rgb, grad_out_rgb, dv_rgb);
  const auto ds_x = softmax_value_backward(frozen, cache.x, grad_out_x, dv_x);

  // S_rgb = (1 - w_x) S~_rgb + w_x S~_x ;  S_x = (1 - w_rgb) S~_x + w_rgb S~_rgb
  const T w_x = cache.guidance.w_x, w_rgb = cache.guidance.w_rgb;
  Tensor<T> draw_rgb(ds_rgb.shape()), draw_x(ds_x.shape());
  T gw_x = T(0), gw_rgb = T(0);
  for (std::size_t i = 0; i < ds_rgb.size(); ++i) {
    const T diff = cache.x.raw[i] - cache.rgb.raw[i];
    gw_x += ds_rgb[i] * diff;
    gw_rgb -= ds_x[i] * diff;
    draw_rgb[i] = (T(1) - w_x) * ds_rgb[i] + w_rgb * ds_x[i];
    draw_x[i] = w_x * ds_rgb[i] + (T(1) - w_rgb) * ds_x[i];
  }
  grads.guidance = {gw_x, gw_rgb};

  LoraFactors<T>* lora_grad = lora ? &grads.lora : nullptr;
  grads.h_rgb = projection_backward(frozen, lora, cache.rgb, draw_rgb, dv_rgb, lora_grad);
  grads.h_x = projection_backward(frozen, lora, cache.x, draw_x, dv_x, lora_grad);
  return grads;
}

template <typename T>
AttentionGrads<T> attention_backward(const AlignedAttentionLayer<T>& layer, const AttentionCache<T>& cache,
                                     const Tensor<T>& grad_out_rgb, const Tensor<T>& grad_out_x) {
  return dual_attention_backward(layer.frozen, &layer.lora, cache, grad_out_rgb, grad_out_x);
}

template <typename T>
MergedAttentionLayer<T> merge_lora(const AlignedAttentionLayer<T>& layer) {
  layer.validate();
  MergedAttentionLayer<T> m;
  m.merged = layer.frozen;
  m.merged.wk = add(layer.frozen.wk, matmul(layer.lora.ak, layer.lora.bk));
  m.merged.wv = add(layer.frozen.wv, matmul(layer.lora.av, layer.lora.bv));
  m.guidance = layer.guidance;
  return m;
}

template <typename T>
AttentionResult<T> self_attention_forward(const FrozenAttention<T>& frozen, const Tensor<T>& h) {
  frozen.validate();
  if (h.rank() != 2 || h.cols() != frozen.d_model()) {
    throw DimensionError("self_attention: tokens " + shape_str(h.shape()) + " vs d_model " +
                         std::to_string(frozen.d_model()));
  }
  AttentionResult<T> res;
  auto& cache = res.cache;
  cache.d_model = frozen.d_model();
  cache.n_heads = frozen.n_heads;
  cache.dual = false;
  cache.rgb = project<T>(frozen, nullptr, h);
  cache.rgb.raw = head_scores(frozen, cache.rgb.q, cache.rgb.k);
  cache.rgb.probs = softmax(cache.rgb.raw, 2);
  res.maps.rgb = cache.rgb.raw;
  res.out_rgb = apply_heads(frozen, cache.rgb.probs, cache.rgb.v);
  return res;
}

template <typename T>
Tensor<T> self_attention_backward(const FrozenAttention<T>& frozen, const AttentionCache<T>& cache,
                                  const Tensor<T>& grad_out) {
  check_cache<T>(frozen, nullptr, cache, false);
  if (grad_out.shape() != cache.rgb.h.shape()) {
    throw DimensionError("self_attention_backward: upstream gradient shape does not match forward output");
  }
  Tensor<T> dv;
  const auto ds = softmax_value_backward(frozen, cache.rgb, grad_out, dv);
  return projection_backward<T>(frozen, nullptr, cache.rgb, ds, dv, nullptr);
}

#define MMFUSE_INSTANTIATE_ATTENTION(T)                                                                         \
  template struct FrozenAttention<T>;                                                                           \
  template struct LoraFactors<T>;                                                                               \
  template struct AlignedAttentionLayer<T>;                                                                     \
  template struct DualStream<T>;                                                                                \
  template MapPair<T> raw_attention_maps(const AlignedAttentionLayer<T>&, const DualStream<T>&);                \
  template MapPair<T> amg_align(const Guidance<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template AttentionResult<T> attention_forward(const AlignedAttentionLayer<T>&, const DualStream<T>&);         \
  template AttentionResult<T> attention_forward(const MergedAttentionLayer<T>&, const DualStream<T>&);          \
  template AttentionResult<T> dual_attention_forward(const FrozenAttention<T>&, const LoraFactors<T>*,          \
                                                     const Guidance<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template AttentionGrads<T> attention_backward(const AlignedAttentionLayer<T>&, const AttentionCache<T>&,      \
                                                const Tensor<T>&, const Tensor<T>&);                            \
  template AttentionGrads<T> dual_attention_backward(const FrozenAttention<T>&, const LoraFactors<T>*,          \
                                                     const AttentionCache<T>&, const Tensor<T>&,                \
                                                     const Tensor<T>&);                                         \
  template MergedAttentionLayer<T> merge_lora(const AlignedAttentionLayer<T>&);                                 \
  template AttentionResult<T> self_attention_forward(const FrozenAttention<T>&, const Tensor<T>&);              \
  template Tensor<T> self_attention_backward(const FrozenAttention<T>&, const AttentionCache<T>&,               \
                                             const Tensor<T>&);

MMFUSE_INSTANTIATE_ATTENTION(float)
MMFUSE_INSTANTIATE_ATTENTION(double)

#undef MMFUSE_INSTANTIATE_ATTENTION

}  // namespace mmfuse
