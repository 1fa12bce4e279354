#pragma once

#include "hmnas/rng.hpp"
#include "hmnas/tensor.hpp"

namespace hmnas::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return random_tensor(std::move(shape), rng, scale);
}

}  // namespace hmnas::testing
