// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmfuse/attention.hpp"
#include "mmfuse/hmoe.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

// Two-stream encoder: a stack of frozen pre-norm blocks shared by the RGB and
// X token streams. Every `insert_every`-th layer swaps plain attention for the
// aligned dual-stream layer and adds two HMoE mixers (after attention and
// after the FFN). Each mixer runs once over the template tokens of both
// streams and once over the candidate tokens of both streams.
//
// Inserted layer, per stream m:
//   h += aligned_attention(LN1(h))_m
//   h += hmoe_attn([z_rgb; z_x]) and hmoe_attn([c_rgb; c_x]), split back by rows
//   h += FFN(LN2(h))
//   h += hmoe_ffn(...) as above
// Plain layer: h += attention(LN1(h)); h += FFN(LN2(h)).
//
// The fused output is c_rgb + c_x of the last layer.

namespace mmfuse {

struct EncoderConfig {
  std::size_t n_layers = 12;
  std::size_t insert_every = 2;  // 0 disables insertion
  std::size_t d_model = 768;
  std::size_t n_heads = 12;
  std::size_t ffn_hidden = 0;  // 0 means 4 * d_model
  std::size_t lora_rank = 8;
  HmoeConfig hmoe_attn{768, 2, 4, 4, PatchAgg::sum};
  HmoeConfig hmoe_ffn{768, 2, 8, 4, PatchAgg::sum};
  std::size_t n_z = 64;
  std::size_t n_c = 256;
  double w_init = 1.0;
  ScaleMode scale_mode = ScaleMode::per_head;

  std::size_t ffn_width() const { return ffn_hidden == 0 ? 4 * d_model : ffn_hidden; }
  std::size_t n_tokens() const { return n_z + n_c; }
  bool is_inserted(std::size_t layer) const { return insert_every != 0 && (layer + 1) % insert_every == 0; }
  std::size_t n_inserted() const { return insert_every == 0 ? 0 : n_layers / insert_every; }
  AttentionConfig attention_config() const;
  void validate() const;

  /// Same structure at a new width: HMoE widths follow d_model.
  static EncoderConfig toy(std::size_t n_layers, std::size_t d_model, std::size_t n_heads, std::size_t n_z,
                           std::size_t n_c);
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;  // [D]
};

template <typename T>
struct FeedForward {
  Tensor<T> w1, b1, w2, b2;  // [D x F], [F], [F x D], [D]
};

template <typename T>
struct FrozenBlock {
  LayerNormParams<T> ln1, ln2;
  FrozenAttention<T> attn;
  FeedForward<T> ffn;

  std::size_t param_count() const;
};

/// Trainable modules of one inserted layer.
template <typename T>
struct Adapter {
  LoraFactors<T> lora;
  Guidance<T> guidance;
  HmoeLayer<T> hmoe_attn, hmoe_ffn;

  std::size_t param_count() const { return lora.param_count() + 2 + hmoe_attn.param_count() + hmoe_ffn.param_count(); }
};

template <typename T>
struct EncoderWeights {
  EncoderConfig config;
  std::vector<FrozenBlock<T>> blocks;
  std::vector<std::optional<Adapter<T>>> adapters;  // indexed by layer

  void validate() const;

  /// Random frozen weights; adapters at their function-preserving init
  /// (LoRA B = 0, HMoE post.b = 0, guidance = w_init).
  static EncoderWeights init(const EncoderConfig& config, Rng& rng);
  /// Adapters with every factor random, for gradient and oracle checks.
  static EncoderWeights init_dense(const EncoderConfig& config, Rng& rng);
};

constexpr double kLayerNormEps = 1e-6;

template <typename T>
Tensor<T> layer_norm(const LayerNormParams<T>& p, const Tensor<T>& x);

template <typename T>
T gelu(T z);

template <typename T>
Tensor<T> feed_forward(const FeedForward<T>& f, const Tensor<T>& x);

template <typename T>
struct LayerNormCache {
  Tensor<T> x_hat;             // [N x D]
  std::vector<T> inv_std;      // [N]
};

template <typename T>
struct FfnCache {
  Tensor<T> x, pre, act;  // input, pre-activation, GELU output
};

template <typename T>
struct StreamLayerCache {
  LayerNormCache<T> ln1, ln2;
  FfnCache<T> ffn;
  AttentionCache<T> self_attn;  // plain layers only
};

template <typename T>
struct LayerCache {
  bool inserted = false;
  StreamLayerCache<T> rgb, x;
  AttentionCache<T> dual_attn;
  HmoeCache<T> attn_z, attn_c, ffn_z, ffn_c;
};

template <typename T>
struct EncoderCache {
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> fused;               // [n_c x D]
  std::vector<MapPair<T>> maps;  // per layer, pre-softmax [heads x N x N]
  Tensor<T> h_rgb, h_x;          // final token states
  EncoderCache<T> cache;
};

template <typename T>
struct EncoderGrads {
  std::vector<std::optional<Adapter<T>>> adapters;  // same layout as weights
  Tensor<T> h_rgb, h_x;
};

template <typename T>
EncoderOutput<T> encoder_forward(const EncoderWeights<T>& weights, const DualStream<T>& stream);

/// Runs each stream through the frozen blocks alone (no adapters anywhere).
template <typename T>
Tensor<T> frozen_tower_forward(const EncoderWeights<T>& weights, const Tensor<T>& h);

/// Gradients of a loss on the fused output; only adapter parameters and the
/// input tokens receive gradients.
template <typename T>
EncoderGrads<T> encoder_backward(const EncoderWeights<T>& weights, const EncoderCache<T>& cache,
                                 const DualStream<T>& stream, const Tensor<T>& grad_fused);

struct ParamReport {
  std::size_t amg_lora = 0;        // LoRA factors + guidance scalars
  std::size_t hmoe = 0;            // both HMoE blocks of every inserted layer
  std::size_t hmoe_attn_block = 0;
  std::size_t hmoe_ffn_block = 0;
  std::size_t learnable = 0;
  std::size_t frozen = 0;
  std::size_t merged_amg = 0;      // learnable AMG-LoRA count after merging
  std::size_t inserted_layers = 0;
  std::vector<std::string> trainable;  // parameter name patterns
};

ParamReport encoder_param_report(const EncoderConfig& config);
void to_json(nlohmann::json& j, const ParamReport& r);

struct MacReport {
  std::uint64_t frozen = 0;
  std::uint64_t lora = 0;
  std::uint64_t hmoe = 0;
  std::uint64_t total = 0;
};

/// Analytic MACs of one two-stream encoder forward (matrix products only).
MacReport encoder_mac_count(const EncoderConfig& config);
void to_json(nlohmann::json& j, const MacReport& r);

// Checkpoint directory: config.json + weights.mmfk (+ weights.mmfk.json).
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const EncoderWeights<T>& weights);

template <typename T>
EncoderWeights<T> load_checkpoint(const std::filesystem::path& dir);

}  // namespace mmfuse
