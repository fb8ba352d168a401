// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/attention.hpp"
#include "mmfuse/encoder.hpp"
#include "mmfuse/hmoe.hpp"
#include "mmfuse/tensor.hpp"

// Scalar-loop reference implementations in f64. They read parameters from the
// same containers as the fast path but compute everything with explicit index
// loops; nothing here calls into ops or kernels.

namespace mmfuse::verify {

using Mat = Tensor<double>;

struct OracleAttention {
  Mat raw_rgb, raw_x;  // [heads x N x N]
  Mat maps_rgb, maps_x;
  Mat out_rgb, out_x;
};

/// `lora` may be null.
OracleAttention oracle_attention(const FrozenAttention<double>& frozen, const LoraFactors<double>* lora,
                                 const Guidance<double>& guidance, const Mat& h_rgb, const Mat& h_x);

/// Single-stream plain attention: output and pre-softmax maps.
std::pair<Mat, Mat> oracle_self_attention(const FrozenAttention<double>& frozen, const Mat& h);

std::pair<Mat, Mat> oracle_amg(double w_x, double w_rgb, const Mat& raw_rgb, const Mat& raw_x);

Mat oracle_split(const Mat& x, std::size_t h);

struct OracleMix {
  Mat logits, weights, x_mix;
};
OracleMix oracle_mix(const Mat& phi, const Mat& x_split);

Mat oracle_experts(const HmoeLayer<double>& layer, const Mat& x_mix);
Mat oracle_affinity(const Mat& logits, std::size_t h, PatchAgg agg);
Mat oracle_hmoe(const HmoeLayer<double>& layer, const Mat& x_in);

Mat oracle_layer_norm(const LayerNormParams<double>& p, const Mat& x);
Mat oracle_ffn(const FeedForward<double>& f, const Mat& x);

struct OracleEncoder {
  Mat fused, h_rgb, h_x;
  std::vector<std::pair<Mat, Mat>> maps;
};
OracleEncoder oracle_encoder(const EncoderWeights<double>& weights, const DualStream<double>& stream);

// ---- oracle equivalence suite ---------------------------------------------

struct OracleReport {
  std::string name;
  nlohmann::json config;
  double max_abs_diff = 0;
  double tolerance = 0;
  bool pass = false;
};

void to_json(nlohmann::json& j, const OracleReport& r);

/// One randomly drawn attention configuration, fast path vs oracle.
OracleReport check_attention_case(std::uint64_t seed, double tolerance = 1e-11);
/// One randomly drawn HMoE configuration, fast path vs oracle.
OracleReport check_hmoe_case(std::uint64_t seed, double tolerance = 1e-11);
/// One small random encoder, fast path vs oracle composition.
OracleReport check_encoder_case(std::uint64_t seed, double tolerance = 1e-11);

/// `n_configs` cases of each of attention and HMoE, plus a few encoder cases.
std::vector<OracleReport> run_oracle_suite(std::size_t n_configs, std::uint64_t seed);

}  // namespace mmfuse::verify
