// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

// Hierarchical mixture-of-experts token mixer over N tokens of width D with
// e experts, h heads per expert and expert rank r:
//
//   X_pre   = pre(X_in)                           low-rank D -> r -> D
//   X_split = split each token into h sub-tokens  [(N h) x (D/h)]
//   L       = X_split Phi                         [(N h) x (e h)]
//   X_mix   = softmax(L, over sub-tokens)^T X_split          [(e h) x (D/h)]
//   Y_head  = f_i(X_mix row i h + j)              expert i shared by its h heads
//   Y_exp   = post(concat_j Y_head)               [e x D]
//   A       = softmax(patchify_hxh(L), over experts)         [N x e]
//   Y_out   = A Y_exp
//
// The module is residual-free; callers add Y_out to their token stream.

namespace mmfuse {

enum class PatchAgg { sum, mean };

struct HmoeConfig {
  std::size_t d_model = 768;
  std::size_t heads_per_expert = 2;
  std::size_t n_experts = 4;
  std::size_t expert_rank = 4;
  PatchAgg patch_agg = PatchAgg::sum;

  std::size_t sub_dim() const { return d_model / heads_per_expert; }
  std::size_t n_heads_total() const { return n_experts * heads_per_expert; }
  void validate() const;
};

void to_json(nlohmann::json& j, const HmoeConfig& c);
void from_json(const nlohmann::json& j, HmoeConfig& c);

/// x -> (x a) b with a [in x r], b [r x out].
template <typename T>
struct LowRank {
  Tensor<T> a, b;

  std::size_t param_count() const { return a.size() + b.size(); }
};

template <typename T>
struct HmoeLayer {
  HmoeConfig config;
  Tensor<T> phi;                    // [(D/h) x (e h)]
  std::vector<LowRank<T>> experts;  // e pairs, (D/h) -> r -> (D/h)
  LowRank<T> pre, post;             // D -> r -> D

  std::size_t param_count() const;
  void validate() const;

  /// Xavier everywhere except post.b = 0, so the block initially outputs 0.
  static HmoeLayer init(const HmoeConfig& config, Rng& rng);
  /// Every factor Xavier; used by verification where a zero output would
  /// hide gradient paths.
  static HmoeLayer init_dense(const HmoeConfig& config, Rng& rng);
  static HmoeLayer zeros_like(const HmoeLayer& other);
};

template <typename T>
struct MixResult {
  Tensor<T> x_mix;    // [(e h) x (D/h)]
  Tensor<T> logits;   // [(N h) x (e h)]
  Tensor<T> weights;  // column-softmax of logits
};

template <typename T>
struct HmoeCache {
  HmoeConfig config;
  Tensor<T> x_in, u_pre, x_split;
  MixResult<T> mix;
  Tensor<T> z_head;    // [(e h) x r] expert bottleneck activations
  Tensor<T> y_cat;     // [e x D] concatenated head outputs
  Tensor<T> u_post;    // [e x r]
  Tensor<T> y_expert;  // [e x D]
  Tensor<T> affinity;  // [N x e]
};

template <typename T>
struct HmoeResult {
  Tensor<T> y_out;
  HmoeCache<T> cache;
};

template <typename T>
struct HmoeGrads {
  Tensor<T> phi;
  std::vector<LowRank<T>> experts;
  LowRank<T> pre, post;
  Tensor<T> x_in;
};

/// Contiguous channel split: sub-token (i h + j) is chunk j of token i.
template <typename T>
Tensor<T> split_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_pre);

template <typename T>
Tensor<T> unsplit_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_split);

template <typename T>
MixResult<T> mix_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_split);

template <typename T>
Tensor<T> expert_transform(const HmoeLayer<T>& layer, const Tensor<T>& x_mix);

/// Sums (or averages) each h x h block of the logits, then row-softmax.
template <typename T>
Tensor<T> token_affinity(const HmoeLayer<T>& layer, const Tensor<T>& logits);

template <typename T>
HmoeResult<T> hmoe_forward(const HmoeLayer<T>& layer, const Tensor<T>& x_in);

template <typename T>
HmoeGrads<T> hmoe_backward(const HmoeLayer<T>& layer, const HmoeCache<T>& cache, const Tensor<T>& grad_y);

/// Per-block parameter count: |Phi| + e 2 (D/h) r + 2 2 D r.
std::size_t hmoe_param_count(const HmoeConfig& config);

/// Multiply-accumulate count of one forward over `n_tokens` tokens
/// (matrix products only; softmax exponentials are not MACs).
std::uint64_t hmoe_mac_count(const HmoeConfig& config, std::size_t n_tokens);

}  // namespace mmfuse
