// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/tensor.hpp"

namespace mmfuse::verify {

constexpr double kGradEps = 1e-5;
constexpr double kGradTol = 1e-6;

/// Central differences (f(θ+εe_i) - f(θ-εe_i)) / 2ε per coordinate.
/// Throws NumericError when f returns a non-finite value.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& theta,
                                double eps = kGradEps);

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0;
  double tolerance = kGradTol;
  bool pass = false;
  std::string fingerprint;
  nlohmann::json config;
};

void to_json(nlohmann::json& j, const GradCheckReport& r);

/// Per-class reports (ak, bk, av, bv, w_x, w_rgb, h_rgb, h_x) for one random
/// small dual-stream layer under loss 0.5 * sum(out^2).
std::vector<GradCheckReport> gradcheck_attention(std::uint64_t seed);

/// Per-class reports (phi, expert.a, expert.b, pre.a, pre.b, post.a, post.b,
/// x_in) for one random small HMoE block.
std::vector<GradCheckReport> gradcheck_hmoe(std::uint64_t seed);

/// Adapter parameter classes of a tiny encoder under loss 0.5 * sum(fused^2).
std::vector<GradCheckReport> gradcheck_encoder(std::uint64_t seed);

/// module in {"attention", "hmoe", "encoder", "all"}; `n_configs` seeds each.
std::vector<GradCheckReport> run_gradcheck_suite(const std::string& module, std::size_t n_configs,
                                                 std::uint64_t seed);

}  // namespace mmfuse::verify
