// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mmfuse/tensor.hpp"

// Pure tensor operations. Inputs are never mutated; every result is a fresh
// tensor. No broadcasting: elementwise ops require identical shapes.

namespace mmfuse {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a * b^T for a [m x k], b [n x k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// a^T * b for a [k x m], b [k x n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Max-subtracted softmax along `axis`. Throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Splits `x` into `parts` equal slices along `axis`.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, std::size_t parts);

/// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// In-place accumulation helpers for backward passes that own their buffers.
template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& x);

template <typename T>
T sum(const Tensor<T>& a);

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T max_abs(const Tensor<T>& a);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
bool all_finite(const Tensor<T>& a);

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace mmfuse
