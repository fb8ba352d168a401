// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/rng.hpp"

#include <cmath>

namespace mmfuse {

template <typename T>
Tensor<T> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

template <typename T>
Tensor<T> xavier_init(Rng& rng, const Shape& shape) {
  if (shape.size() != 2) throw ShapeError("xavier_init needs a rank-2 shape, got " + shape_str(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  return uniform_tensor<T>(rng, shape, -bound, bound);
}

template Tensor<float> uniform_tensor<float>(Rng&, const Shape&, double, double);
template Tensor<double> uniform_tensor<double>(Rng&, const Shape&, double, double);
template Tensor<float> xavier_init<float>(Rng&, const Shape&);
template Tensor<double> xavier_init<double>(Rng&, const Shape&);

}  // namespace mmfuse
