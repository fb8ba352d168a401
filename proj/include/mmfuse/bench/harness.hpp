// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/bench/comparators.hpp"
#include "mmfuse/encoder.hpp"

namespace mmfuse::bench {

struct TimingProtocol {
  std::size_t warmup = 5;
  std::size_t iterations = 30;
  /// A sample shorter than this is repeated inside one timed region.
  double min_sample_seconds = 1e-3;
  std::size_t max_inner = 1 << 14;

  void validate() const;
};

struct Timing {
  double median = 0, q1 = 0, q3 = 0, min = 0, max = 0;  // seconds per call
  std::size_t iterations = 0;
  std::size_t inner = 1;
  bool reliable = true;

  double iqr() const { return q3 - q1; }
};

/// Linear-interpolated quantile of a sample, q in [0, 1].
double quantile(std::vector<double> xs, double q);

Timing time_callable(const std::function<void()>& fn, const TimingProtocol& protocol);

struct BenchReport {
  std::string op;
  FusionConfig config;
  std::uint64_t macs = 0;
  std::size_t params = 0;
  Timing timing;
  std::size_t warmup = 0;
  std::string timestamp;  // ISO-8601 UTC
  std::uint64_t seed = 0;
  int threads = 1;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void to_json(nlohmann::json& j, const BenchReport& r);

std::string utc_timestamp();

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct ScalingResult {
  std::vector<BenchReport> reports;
  double slope = 0;
  bool reliable = true;
};

/// f32, single thread. n_list must be strictly increasing with >= 3 points.
ScalingResult bench_scaling(Variant variant, const std::vector<std::size_t>& n_list, const FusionConfig& base,
                            const TimingProtocol& protocol, std::uint64_t seed);

// ---- sweep -----------------------------------------------------------------

enum class SweepAxis { heads, experts, lora_rank, hmoe_rank, w_init, weight_type };

SweepAxis parse_axis(const std::string& name);
std::string axis_name(SweepAxis a);

struct SweepRow {
  std::string value;
  bool ok = false;
  std::string error;
  std::size_t params = 0;       // learnable encoder parameters
  std::size_t amg_params = 0;
  std::size_t hmoe_params = 0;
  std::uint64_t macs = 0;       // encoder forward
  bool timed = false;
  Timing timing;                // forward of the module the axis changes
  nlohmann::json descriptor;    // structural notes for w_init / weight_type
};

struct SweepTable {
  SweepAxis axis;
  std::vector<SweepRow> rows;
  std::string footer;
};

struct SweepOptions {
  bool timing = true;
  TimingProtocol protocol;
  std::uint64_t seed = 42;
};

/// Rows never throw: an invalid value becomes a row with `error` set.
SweepTable sweep(SweepAxis axis, const std::vector<std::string>& values, const EncoderConfig& base,
                 const SweepOptions& options);

void to_json(nlohmann::json& j, const SweepRow& r);
void to_json(nlohmann::json& j, const SweepTable& t);
std::string sweep_text(const SweepTable& t);

// ---- audit -----------------------------------------------------------------

/// Reference budgets the audit compares against, in parameters.
struct ReferenceBudget {
  double amg_lora = 0.14e6;
  double hmoe = 0.46e6;
  double total = 0.6e6;
};

struct AuditReport {
  EncoderConfig config;
  ParamReport params;
  MacReport macs;
  ReferenceBudget reference;
};

AuditReport audit(const EncoderConfig& config);
void to_json(nlohmann::json& j, const AuditReport& a);
std::string audit_text(const AuditReport& a);

}  // namespace mmfuse::bench
