#pragma once

#include "dvd/tensor.hpp"

#include <cstdint>
#include <random>

namespace dvd::testing {

/// Uniform(lo, hi) entries from a fixed seed.
inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return (a.data() - b.data()).abs().maxCoeff(); }

}  // namespace dvd::testing
