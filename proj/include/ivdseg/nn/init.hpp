#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/nn/tensor.hpp"
#include "ivdseg/rng.hpp"

namespace ivdseg::nn {

/// He initialization: i.i.d. normal(0, sqrt(2 / fan_in)), deterministic per seed.
template <typename S = float>
std::vector<S> he_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
  if (fan_in == 0) throw DomainError("he_init: fan_in must be positive");
  SplitMix64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<S> out(shape_size(shape));
  for (auto& w : out) w = static_cast<S>(dist(rng));
  return out;
}

}  // namespace ivdseg::nn
