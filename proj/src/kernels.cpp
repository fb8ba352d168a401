// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmfuse::kernels {

namespace {

// Below this much work a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

template <typename T>
inline void gemm_row(const T* a_row, const T* b, T* c_row, std::size_t k, std::size_t n) {
  std::fill(c_row, c_row + n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a_row[p];
    const T* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// Rows [i0, i1) of a^T b. The contraction index runs outermost so b is read
// once per block; each output element still accumulates in order of p.
template <typename T>
inline void gemm_tn_rows(const T* a, const T* b, T* c, std::size_t i0, std::size_t i1, std::size_t m, std::size_t k,
                         std::size_t n) {
  std::fill(c + i0 * n, c + i1 * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* b_row = b + p * n;
    for (std::size_t i = i0; i < i1; ++i) {
      const T av = a[p * m + i];
      T* c_row = c + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

constexpr std::size_t kTnBlock = 32;

template <typename T>
inline void softmax_line(const T* in, T* out, std::size_t len, std::size_t stride) {
  T mx = in[0];
  for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[i * stride]);
  T sum = T(0);
  for (std::size_t i = 0; i < len; ++i) {
    const T e = std::exp(in[i * stride] - mx);
    out[i * stride] = e;
    sum += e;
  }
  for (std::size_t i = 0; i < len; ++i) out[i * stride] /= sum;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (std::int64_t i = 0; i < rows; ++i) gemm_row(a + i * k, b, c + i * n, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto blocks = static_cast<std::int64_t>((m + kTnBlock - 1) / kTnBlock);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (std::int64_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kTnBlock;
    gemm_tn_rows(a, b, c, i0, std::min(m, i0 + kTnBlock), m, k, n);
  }
}

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
  const auto n_cols = static_cast<std::int64_t>(cols);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::int64_t j = 0; j < n_cols; ++j) {
    for (std::size_t i = 0; i < rows; ++i) out[j * rows + i] = a[i * cols + j];
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm(a, bt.data(), c, m, k, n);
}

template <typename T>
void softmax(const T* in, T* out, std::size_t outer, std::size_t len, std::size_t inner) {
  const auto lines = static_cast<std::int64_t>(outer * inner);
#pragma omp parallel for schedule(static) if (outer * len * inner > kParallelThreshold)
  for (std::int64_t l = 0; l < lines; ++l) {
    const std::size_t o = static_cast<std::size_t>(l) / inner;
    const std::size_t i = static_cast<std::size_t>(l) % inner;
    const std::size_t base = o * len * inner + i;
    softmax_line(in + base, out + base, len, inner);
  }
}

namespace serial {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(a + i * k, b, c + i * n, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_tn_rows(a, b, c, 0, m, m, k, n);
}

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm(a, bt.data(), c, m, k, n);
}

template <typename T>
void softmax(const T* in, T* out, std::size_t outer, std::size_t len, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      softmax_line(in + base, out + base, len, inner);
    }
}

}  // namespace serial

}  // namespace mmfuse::kernels

#define MMFUSE_INSTANTIATE_KERNELS(NS, T)                                                          \
  template void NS::gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);     \
  template void NS::gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);  \
  template void NS::gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);  \
  template void NS::transpose<T>(const T*, T*, std::size_t, std::size_t);                        \
  template void NS::softmax<T>(const T*, T*, std::size_t, std::size_t, std::size_t);

MMFUSE_INSTANTIATE_KERNELS(mmfuse::kernels, float)
MMFUSE_INSTANTIATE_KERNELS(mmfuse::kernels, double)
MMFUSE_INSTANTIATE_KERNELS(mmfuse::kernels::serial, float)
MMFUSE_INSTANTIATE_KERNELS(mmfuse::kernels::serial, double)

#undef MMFUSE_INSTANTIATE_KERNELS
