// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/verify/alignment.hpp"

#include <algorithm>
#include <cmath>

#include "mmfuse/error.hpp"

namespace mmfuse::verify {

void to_json(nlohmann::json& j, const AlignmentStats& s) {
  j = {{"cosine", s.cosine}, {"skl", s.skl}, {"mean_cosine", s.mean_cosine}, {"mean_skl", s.mean_skl}};
}

double map_cosine(const double* a, const double* b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double symmetric_kl(const double* p, const double* q, std::size_t n) {
  // KL(p||q) + KL(q||p) = sum (p - q)(log p - log q); written this way the
  // value is exactly symmetric and exactly zero for p == q.
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = std::log(std::max(p[i], kSklClamp));
    const double lq = std::log(std::max(q[i], kSklClamp));
    s += (p[i] - q[i]) * (lp - lq);
  }
  return 0.5 * s;
}

Tensor<double> row_softmax(const Tensor<double>& maps) {
  if (maps.rank() != 3) throw DimensionError("row_softmax: expected [heads x N x N], got " + shape_str(maps.shape()));
  const std::size_t rows = maps.dim(0) * maps.dim(1), n = maps.dim(2);
  Tensor<double> out(maps.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = maps.raw() + r * n;
    double* o = out.raw() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return out;
}

AlignmentStats alignment_stats(const std::vector<Tensor<double>>& maps_rgb,
                               const std::vector<Tensor<double>>& maps_x) {
  if (maps_rgb.size() != maps_x.size() || maps_rgb.empty()) {
    throw DimensionError("alignment_stats: need the same non-zero number of layers for both streams");
  }
  AlignmentStats s;
  for (std::size_t l = 0; l < maps_rgb.size(); ++l) {
    const auto& a = maps_rgb[l];
    const auto& b = maps_x[l];
    if (a.shape() != b.shape() || a.rank() != 3 || a.dim(1) != a.dim(2)) {
      throw DimensionError("alignment_stats: layer " + std::to_string(l) + " shapes " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    }
    const std::size_t heads = a.dim(0), n = a.dim(1), plane = n * n;
    const auto pa = row_softmax(a);
    const auto pb = row_softmax(b);
    double cos = 0, skl = 0;
    for (std::size_t h = 0; h < heads; ++h) {
      cos += map_cosine(a.raw() + h * plane, b.raw() + h * plane, plane);
      double rows = 0;
      for (std::size_t i = 0; i < n; ++i) {
        rows += symmetric_kl(pa.raw() + h * plane + i * n, pb.raw() + h * plane + i * n, n);
      }
      skl += rows / static_cast<double>(n);
    }
    s.cosine.push_back(cos / static_cast<double>(heads));
    s.skl.push_back(skl / static_cast<double>(heads));
  }
  for (std::size_t l = 0; l < s.cosine.size(); ++l) {
    s.mean_cosine += s.cosine[l];
    s.mean_skl += s.skl[l];
  }
  s.mean_cosine /= static_cast<double>(s.cosine.size());
  s.mean_skl /= static_cast<double>(s.skl.size());
  return s;
}

}  // namespace mmfuse::verify
