// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

// Dual-stream attention with a LoRA bypass shared by both modalities on W_k
// and W_v, and Adaptive Mutual Guidance: a learnable linear interpolation of
// the two streams' pre-softmax attention maps.
//
//   K~_m   = H_m W_k + (H_m A_k) B_k          V_m = H_m W_v + (H_m A_v) B_v
//   S~_m   = per-head (H_m W_q) K~_m^T * scale
//   S_rgb  = S~_rgb + w_x   (S~_x   - S~_rgb)
//   S_x    = S~_x   + w_rgb (S~_rgb - S~_x)
//   out_m  = concat_heads( softmax_rows(S_m) V_m )
//
// Attention maps are laid out [heads x N x N].

namespace mmfuse {

/// How pre-softmax scores are scaled: 1/sqrt(D/heads) (standard multi-head)
/// or 1/sqrt(D) (the whole-width variant).
enum class ScaleMode { per_head, full_dim };

struct AttentionConfig {
  std::size_t d_model = 768;
  std::size_t n_heads = 12;
  std::size_t rank = 8;
  double w_init = 1.0;
  ScaleMode scale_mode = ScaleMode::per_head;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

void to_json(nlohmann::json& j, const AttentionConfig& c);
void from_json(const nlohmann::json& j, AttentionConfig& c);

/// Frozen Q/K/V projections (each D x D).
template <typename T>
struct FrozenAttention {
  Tensor<T> wq, wk, wv;
  std::size_t n_heads = 1;
  ScaleMode scale_mode = ScaleMode::per_head;

  std::size_t d_model() const { return wq.empty() ? 0 : wq.dim(0); }
  std::size_t head_dim() const { return d_model() / n_heads; }
  T score_scale() const;
  std::size_t param_count() const { return wq.size() + wk.size() + wv.size(); }
  void validate() const;

  static FrozenAttention init(std::size_t d_model, std::size_t n_heads, ScaleMode mode, Rng& rng);
};

/// Low-rank factors A (D x r), B (r x D) for W_k and W_v.
template <typename T>
struct LoraFactors {
  Tensor<T> ak, bk, av, bv;

  std::size_t rank() const { return ak.empty() ? 0 : ak.dim(1); }
  std::size_t param_count() const { return ak.size() + bk.size() + av.size() + bv.size(); }
  void validate(std::size_t d_model) const;

  /// A factors Xavier, B factors zero: the bypass starts as an exact no-op.
  static LoraFactors init(std::size_t d_model, std::size_t rank, Rng& rng);
  static LoraFactors zeros_like(const LoraFactors& other);
};

template <typename T>
struct Guidance {
  T w_x = T(1);
  T w_rgb = T(1);
};

template <typename T>
struct AlignedAttentionLayer {
  FrozenAttention<T> frozen;
  LoraFactors<T> lora;
  Guidance<T> guidance;

  std::size_t d_model() const { return frozen.d_model(); }
  std::size_t n_heads() const { return frozen.n_heads; }
  std::size_t rank() const { return lora.rank(); }
  /// LoRA factors plus the two guidance scalars.
  std::size_t trainable_count() const { return lora.param_count() + 2; }
  std::size_t frozen_count() const { return frozen.param_count(); }
  void validate() const;

  static AlignedAttentionLayer init(const AttentionConfig& config, Rng& rng);
};

/// Inference form: LoRA folded into W_k / W_v. Only the guidance scalars
/// remain learnable.
template <typename T>
struct MergedAttentionLayer {
  FrozenAttention<T> merged;
  Guidance<T> guidance;

  std::size_t lora_param_count() const { return 0; }
  std::size_t trainable_count() const { return 2; }
};

/// Paired RGB / X-modal token sequences, each [(n_z + n_c) x D], template
/// tokens first.
template <typename T>
struct DualStream {
  Tensor<T> h_rgb, h_x;
  std::size_t n_z = 0, n_c = 0;

  std::size_t n_tokens() const { return n_z + n_c; }
  void validate(std::size_t d_model) const;
};

template <typename T>
struct MapPair {
  Tensor<T> rgb, x;
};

/// Everything the backward pass of one modality needs.
template <typename T>
struct StreamCache {
  Tensor<T> h;        // input tokens [N x D]
  Tensor<T> q, k, v;  // projections [N x D], LoRA already applied to k, v
  Tensor<T> u_k, u_v; // H A_k, H A_v [N x r]; empty without LoRA
  Tensor<T> raw;      // pre-guidance scores [heads x N x N]
  Tensor<T> probs;    // softmax of the aligned scores [heads x N x N]
};

template <typename T>
struct AttentionCache {
  std::size_t d_model = 0, n_heads = 0, rank = 0;
  bool dual = false;
  Guidance<T> guidance;
  StreamCache<T> rgb, x;
};

template <typename T>
struct AttentionResult {
  Tensor<T> out_rgb, out_x;
  /// Aligned pre-softmax maps (equal to the raw maps for a single stream).
  MapPair<T> maps;
  AttentionCache<T> cache;
};

template <typename T>
struct AttentionGrads {
  LoraFactors<T> lora;
  Guidance<T> guidance;  // d/dw_x and d/dw_rgb
  Tensor<T> h_rgb, h_x;
};

/// Unnormalized per-head maps of both streams through the shared bypass.
template <typename T>
MapPair<T> raw_attention_maps(const AlignedAttentionLayer<T>& layer, const DualStream<T>& stream);

/// Mutual guidance on pre-softmax maps. Both outputs read the original inputs.
template <typename T>
MapPair<T> amg_align(const Guidance<T>& guidance, const Tensor<T>& raw_rgb, const Tensor<T>& raw_x);

template <typename T>
MapPair<T> amg_align(const AlignedAttentionLayer<T>& layer, const Tensor<T>& raw_rgb, const Tensor<T>& raw_x) {
  return amg_align(layer.guidance, raw_rgb, raw_x);
}

template <typename T>
AttentionResult<T> attention_forward(const AlignedAttentionLayer<T>& layer, const DualStream<T>& stream);

template <typename T>
AttentionResult<T> attention_forward(const MergedAttentionLayer<T>& layer, const DualStream<T>& stream);

/// Dual-stream forward on borrowed parts; `lora` may be null (no bypass).
template <typename T>
AttentionResult<T> dual_attention_forward(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora,
                                          const Guidance<T>& guidance, const Tensor<T>& h_rgb,
                                          const Tensor<T>& h_x);

template <typename T>
AttentionGrads<T> attention_backward(const AlignedAttentionLayer<T>& layer, const AttentionCache<T>& cache,
                                     const Tensor<T>& grad_out_rgb, const Tensor<T>& grad_out_x);

template <typename T>
AttentionGrads<T> dual_attention_backward(const FrozenAttention<T>& frozen, const LoraFactors<T>* lora,
                                          const AttentionCache<T>& cache, const Tensor<T>& grad_out_rgb,
                                          const Tensor<T>& grad_out_x);

template <typename T>
MergedAttentionLayer<T> merge_lora(const AlignedAttentionLayer<T>& layer);

// Plain frozen self-attention of one stream (non-adapted encoder layers).

template <typename T>
AttentionResult<T> self_attention_forward(const FrozenAttention<T>& frozen, const Tensor<T>& h);

/// Input gradient only; frozen weights never receive gradients.
template <typename T>
Tensor<T> self_attention_backward(const FrozenAttention<T>& frozen, const AttentionCache<T>& cache,
                                  const Tensor<T>& grad_out);

/// LoRA + guidance parameters per adapted layer: 2 * (D r + r D) + 2.
std::size_t amg_lora_param_count(std::size_t d_model, std::size_t rank);

}  // namespace mmfuse
