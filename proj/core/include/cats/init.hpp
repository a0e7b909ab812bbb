#pragma once

#include <cmath>
#include <string_view>

#include "cats/random.hpp"
#include "cats/tensor.hpp"

namespace cats {

// Parameter initialisers. Each draws from a stream derived from (seed, name),
// so a parameter's initial value does not depend on what else the model holds.

template <typename T>
Tensor<T> truncated_normal(Shape shape, double std, std::uint64_t seed, std::string_view name) {
  Tensor<T> t(std::move(shape));
  Rng rng(derive_seed(seed, name));
  for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(std));
  return t;
}

template <typename T>
Tensor<T> normal(Shape shape, double std, std::uint64_t seed, std::string_view name) {
  Tensor<T> t(std::move(shape));
  Rng rng(derive_seed(seed, name));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * std);
  return t;
}

// He-normal for leaky-ramp activations.
template <typename T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, std::uint64_t seed, std::string_view name) {
  return normal<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), seed, name);
}

}  // namespace cats
