// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/bench/comparators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmfuse/ops.hpp"

namespace mmfuse::bench {

Variant parse_variant(const std::string& name) {
  if (name == "hmoe") return Variant::hmoe;
  if (name == "xattn" || name == "cross_attention") return Variant::xattn;
  if (name == "mcp" || name == "mcp_local") return Variant::mcp;
  throw ConfigError("unknown variant '" + name + "' (hmoe, xattn, mcp)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::hmoe:
      return "hmoe";
    case Variant::xattn:
      return "xattn";
    case Variant::mcp:
      return "mcp";
  }
  return "?";
}

HmoeConfig FusionConfig::hmoe_config() const {
  return {d_model, heads_per_expert, n_experts, expert_rank, PatchAgg::sum};
}

void FusionConfig::validate(Variant v) const {
  if (n_tokens == 0 || d_model == 0) throw ConfigError("fusion: n_tokens and d_model must be positive");
  if (v == Variant::hmoe) {
    hmoe_config().validate();
  } else if (proj_rank == 0 || proj_rank >= d_model) {
    throw ConfigError("fusion: proj_rank must satisfy 1 <= r < d_model");
  }
}

std::uint64_t fusion_mac_count(Variant v, const FusionConfig& c) {
  c.validate(v);
  const std::uint64_t n = c.n_tokens, d = c.d_model, r = c.proj_rank;
  switch (v) {
    case Variant::hmoe:
      return hmoe_mac_count(c.hmoe_config(), 2 * c.n_tokens);
    case Variant::xattn:
      // two directions x (scores + weighted values), six low-rank projections
      return 4 * n * n * d + 6 * 2 * n * d * r;
    case Variant::mcp:
      return n * (2 * d) * r + 2 * n * r * d;
  }
  return 0;
}

template <typename T>
FusionComparator<T>::FusionComparator(Variant variant, const FusionConfig& config, Rng& rng)
    : variant_(variant), config_(config) {
  config.validate(variant);
  const std::size_t d = config.d_model, r = config.proj_rank;
  switch (variant) {
    case Variant::hmoe:
      hmoe_ = HmoeLayer<T>::init_dense(config.hmoe_config(), rng);
      break;
    case Variant::xattn:
      for (auto* p : {&q_, &k_, &v_}) *p = {xavier_init<T>(rng, {d, r}), xavier_init<T>(rng, {r, d})};
      break;
    case Variant::mcp:
      down_ = xavier_init<T>(rng, {2 * d, r});
      up_a_ = xavier_init<T>(rng, {r, d});
      up_b_ = xavier_init<T>(rng, {r, d});
      break;
  }
}

template <typename T>
std::size_t FusionComparator<T>::param_count() const {
  switch (variant_) {
    case Variant::hmoe:
      return hmoe_.param_count();
    case Variant::xattn:
      return q_.param_count() + k_.param_count() + v_.param_count();
    case Variant::mcp:
      return down_.size() + up_a_.size() + up_b_.size();
  }
  return 0;
}

template <typename T>
std::uint64_t FusionComparator<T>::mac_count() const {
  return fusion_mac_count(variant_, config_);
}

namespace {

template <typename T>
Tensor<T> low_rank(const LowRank<T>& p, const Tensor<T>& x) {
  return matmul(matmul(x, p.a), p.b);
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T s) {
  return matmul(softmax(scale(matmul_nt(q, k), s), 1), v);
}

}  // namespace

template <typename T>
TokenPair<T> FusionComparator<T>::forward(const Tensor<T>& a, const Tensor<T>& b) const {
  if (a.rank() != 2 || a.shape() != b.shape() || a.cols() != config_.d_model) {
    throw DimensionError("fusion: inputs " + shape_str(a.shape()) + " / " + shape_str(b.shape()) +
                         " incompatible with d_model " + std::to_string(config_.d_model));
  }
  const std::size_t n = a.rows();
  switch (variant_) {
    case Variant::hmoe: {
      const auto y = hmoe_forward(hmoe_, concat(std::vector<Tensor<T>>{a, b}, 0)).y_out;
      return {slice_rows(y, 0, n), slice_rows(y, n, 2 * n)};
    }
    case Variant::xattn: {
      const T s = T(1) / std::sqrt(static_cast<T>(config_.d_model));
      const auto qa = low_rank(q_, a), ka = low_rank(k_, a), va = low_rank(v_, a);
      const auto qb = low_rank(q_, b), kb = low_rank(k_, b), vb = low_rank(v_, b);
      return {attend(qa, kb, vb, s), attend(qb, ka, va, s)};
    }
    case Variant::mcp: {
      auto u = matmul(concat(std::vector<Tensor<T>>{a, b}, 1), down_);
      for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::max(u[i], T(0));
      return {matmul(u, up_a_), matmul(u, up_b_)};
    }
  }
  return {};
}

LocalityResult locality_check(Variant v, const FusionConfig& base, std::uint64_t seed) {
  Rng rng(seed);
  FusionConfig c = base;
  const std::size_t n = c.n_tokens;
  const FusionComparator<double> op(v, c, rng);
  const auto a = uniform_tensor<double>(rng, {n, c.d_model}, -1.0, 1.0);
  const auto b = uniform_tensor<double>(rng, {n, c.d_model}, -1.0, 1.0);
  const auto ref = op.forward(a, b);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.next_u64() % i]);
  Tensor<double> pa(a.shape()), pb(b.shape());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.row_ptr(perm[i]), c.d_model, pa.row_ptr(i));
    std::copy_n(b.row_ptr(perm[i]), c.d_model, pb.row_ptr(i));
  }
  const auto permuted = op.forward(pa, pb);
  LocalityResult r;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c.d_model; ++k) {
      r.max_perm_diff = std::max({r.max_perm_diff, std::fabs(permuted.a(i, k) - ref.a(perm[i], k)),
                                  std::fabs(permuted.b(i, k) - ref.b(perm[i], k))});
    }
  r.permutation_equivariant = r.max_perm_diff <= 1e-12;

  const std::size_t j = rng.next_u64() % n;
  Tensor<double> za = a, zb = b;
  std::fill_n(za.row_ptr(j), c.d_model, 0.0);
  std::fill_n(zb.row_ptr(j), c.d_model, 0.0);
  const auto zeroed = op.forward(za, zb);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == j) continue;
    for (std::size_t k = 0; k < c.d_model; ++k) {
      r.max_leak = std::max({r.max_leak, std::fabs(zeroed.a(i, k) - ref.a(i, k)),
                             std::fabs(zeroed.b(i, k) - ref.b(i, k))});
    }
  }
  r.zeroing_local = r.max_leak == 0.0;
  return r;
}

template class FusionComparator<float>;
template class FusionComparator<double>;

}  // namespace mmfuse::bench
