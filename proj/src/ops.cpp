// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/ops.hpp"

#include <algorithm>
#include <cmath>

#include "mmfuse/kernels.hpp"

namespace mmfuse {

namespace {

void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError(std::string(what) + ": expected rank-2 operand, got " + shape_str(s));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> c({a.rows(), b.cols()});
  kernels::gemm(a.raw(), b.raw(), c.raw(), a.rows(), a.cols(), b.cols());
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul_nt");
  require_rank2(b.shape(), "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor<T> c({a.rows(), b.rows()});
  kernels::gemm_nt(a.raw(), b.raw(), c.raw(), a.rows(), a.cols(), b.rows());
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul_tn");
  require_rank2(b.shape(), "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner dimensions disagree, " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  Tensor<T> c({a.cols(), b.cols()});
  kernels::gemm_tn(a.raw(), b.raw(), c.raw(), a.cols(), a.rows(), b.cols());
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a.shape(), "transpose");
  Tensor<T> out({a.cols(), a.rows()});
  kernels::transpose(a.raw(), out.raw(), a.rows(), a.cols());
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  if (!all_finite(x)) throw NumericError("softmax: non-finite input");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> out(x.shape());
  kernels::softmax(x.raw(), out.raw(), outer, x.dim(axis), inner);
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

  Tensor<T> out(out_shape);
  const std::size_t out_block = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.raw() + o * block, block, out.raw() + o * out_block + offset);
    }
    offset += block;
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, std::size_t parts) {
  if (axis >= x.rank()) throw DimensionError("split: axis out of range for " + shape_str(x.shape()));
  if (parts == 0 || x.dim(axis) % parts != 0) {
    throw DimensionError("split: " + std::to_string(parts) + " parts do not divide axis of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape part_shape = x.shape();
  part_shape[axis] /= parts;
  const std::size_t block = part_shape[axis] * inner;
  const std::size_t src_block = x.dim(axis) * inner;

  std::vector<Tensor<T>> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    Tensor<T> t(part_shape);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.raw() + o * src_block + p * block, block, t.raw() + o * block);
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x.shape(), "slice_rows");
  if (begin >= end || end > x.rows()) throw DimensionError("slice_rows: bad range for " + shape_str(x.shape()));
  Tensor<T> out({end - begin, x.cols()});
  std::copy_n(x.row_ptr(begin), out.size(), out.raw());
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x.shape(), "slice_cols");
  if (begin >= end || end > x.cols()) throw DimensionError("slice_cols: bad range for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  Tensor<T> out({x.rows(), w});
  for (std::size_t i = 0; i < x.rows(); ++i) std::copy_n(x.row_ptr(i) + begin, w, out.row_ptr(i));
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "hadamard");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return Tensor<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& x) {
  require_same(acc, x, "add_into");
  for (std::size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
}

template <typename T>
T sum(const Tensor<T>& a) {
  T s = T(0);
  for (auto v : a.data()) s += v;
  return s;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "dot");
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = T(0);
  for (auto v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "max_abs_diff");
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = std::abs(a[i] - b[i]);
    if (std::isnan(d)) return d;
    m = std::max(m, d);
  }
  return m;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

#define MMFUSE_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> transpose(const Tensor<T>&);                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                   \
  template std::vector<Tensor<T>> split(const Tensor<T>&, std::size_t, std::size_t);       \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template void add_into(Tensor<T>&, const Tensor<T>&);                                    \
  template T sum(const Tensor<T>&);                                                        \
  template T dot(const Tensor<T>&, const Tensor<T>&);                                      \
  template T max_abs(const Tensor<T>&);                                                    \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);                             \
  template bool all_finite(const Tensor<T>&);

MMFUSE_INSTANTIATE_OPS(float)
MMFUSE_INSTANTIATE_OPS(double)

#undef MMFUSE_INSTANTIATE_OPS

}  // namespace mmfuse
