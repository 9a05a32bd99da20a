#pragma once

#include <cmath>

#include "ulike/rng.hpp"
#include "ulike/tensor.hpp"

namespace ulike::testing {

template <typename T = double>
Tensor<T> randn(Extents shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T = double>
Tensor<T> randu(Extents shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace ulike::testing
