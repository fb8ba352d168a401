// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

// Raw dense kernels over row-major buffers. Two builds of every kernel:
//
//   kernels::          OpenMP-parallel over output rows / softmax lines
//   kernels::serial::  single-threaded reference
//
// Both reduce every output element sequentially over the contraction axis,
// so the parallel results are bit-identical to the serial ones for any
// thread count. Output buffers are overwritten, never accumulated into.

namespace mmfuse::kernels {

/// c[m x n] = a[m x k] * b[k x n]
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] = a^T * b with a stored [k x m], b stored [k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] = a * b^T with a stored [m x k], b stored [n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols);

/// Max-subtracted softmax over the middle axis of an [outer x len x inner] buffer.
template <typename T>
void softmax(const T* in, T* out, std::size_t outer, std::size_t len, std::size_t inner);

/// Threads an OpenMP region would use (1 when built without OpenMP).
int max_threads();
void set_num_threads(int n);

namespace serial {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols);
template <typename T>
void softmax(const T* in, T* out, std::size_t outer, std::size_t len, std::size_t inner);

}  // namespace serial

}  // namespace mmfuse::kernels
