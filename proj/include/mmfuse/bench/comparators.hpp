// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "mmfuse/hmoe.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

// Three fusion operators with the same call shape: a pair of [N x D] token
// tensors (one per modality) in, a pair out.
//
//   hmoe   HMoE over the stacked [a; b] tokens, split back by rows
//   xattn  single-head bidirectional cross-attention, Q from one stream and
//          K/V from the other, low-rank (D -> r -> D) projections, 1/sqrt(D)
//   mcp    per-position bottleneck: u = relu([a_p, b_p] W_down),
//          a'_p = u W_up_a, b'_p = u W_up_b

namespace mmfuse::bench {

enum class Variant { hmoe, xattn, mcp };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct FusionConfig {
  std::size_t n_tokens = 512;  // per stream
  std::size_t d_model = 768;
  std::size_t n_experts = 8;
  std::size_t heads_per_expert = 2;
  std::size_t expert_rank = 4;
  std::size_t proj_rank = 8;  // xattn projections and mcp bottleneck

  HmoeConfig hmoe_config() const;
  void validate(Variant v) const;
};

/// Analytic MACs of one forward at c.n_tokens tokens per stream.
std::uint64_t fusion_mac_count(Variant v, const FusionConfig& c);

template <typename T>
struct TokenPair {
  Tensor<T> a, b;
};

template <typename T>
class FusionComparator {
 public:
  FusionComparator(Variant variant, const FusionConfig& config, Rng& rng);

  Variant variant() const { return variant_; }
  const FusionConfig& config() const { return config_; }

  TokenPair<T> forward(const Tensor<T>& a, const Tensor<T>& b) const;
  std::size_t param_count() const;
  /// Analytic MACs at the configured n_tokens.
  std::uint64_t mac_count() const;

 private:
  Variant variant_;
  FusionConfig config_;
  HmoeLayer<T> hmoe_;
  LowRank<T> q_, k_, v_;  // xattn
  Tensor<T> down_, up_a_, up_b_;  // mcp
};

struct LocalityResult {
  bool permutation_equivariant = false;
  bool zeroing_local = false;
  double max_perm_diff = 0;
  double max_leak = 0;  // largest change at i != j after zeroing position j

  bool local() const { return permutation_equivariant && zeroing_local; }
};

/// Position-locality check in f64: permute positions of both streams with one
/// permutation, and zero position j of both streams.
LocalityResult locality_check(Variant v, const FusionConfig& config, std::uint64_t seed);

}  // namespace mmfuse::bench
