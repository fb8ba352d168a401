// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/tensor.hpp"

// Agreement between the two streams' attention maps. Inputs are pre-softmax
// maps [heads x N x N]; SKL is taken on their row softmax.

namespace mmfuse::verify {

constexpr double kSklClamp = 1e-12;

struct AlignmentStats {
  std::vector<double> cosine;  // per layer, mean over heads
  std::vector<double> skl;     // per layer, mean over rows then heads
  double mean_cosine = 0;
  double mean_skl = 0;
};

void to_json(nlohmann::json& j, const AlignmentStats& s);

/// Cosine of two flattened maps. Two all-zero maps count as identical (1),
/// one all-zero map as orthogonal (0).
double map_cosine(const double* a, const double* b, std::size_t n);

/// 0.5 [KL(p||q) + KL(q||p)] of two distributions, logs clamped at 1e-12.
double symmetric_kl(const double* p, const double* q, std::size_t n);

/// Row softmax over the last axis of a [heads x N x N] map.
Tensor<double> row_softmax(const Tensor<double>& maps);

AlignmentStats alignment_stats(const std::vector<Tensor<double>>& maps_rgb, const std::vector<Tensor<double>>& maps_x);

}  // namespace mmfuse::verify
