#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "chada/tensor.hpp"

namespace chada {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for a tuple such as (seed, step, image, view).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(seed);
  for (auto p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

/// Normal(0, stddev) truncated to +-2 stddev by rejection.
template <typename T>
void fill_truncated_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.mutable_values()) {
    double z;
    do {
      z = dist(rng);
    } while (z < -2.0 || z > 2.0);
    v = static_cast<T>(z * stddev);
  }
}

template <typename T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.mutable_values()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.mutable_values()) v = static_cast<T>(dist(rng));
}

}  // namespace chada
