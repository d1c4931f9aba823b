// SPDX-License-Identifier: Apache-2.0

#include "convfuse/random.hpp"

#include <cmath>

namespace convfuse {

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : label) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer over the combined value
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor gaussian(const Shape& shape, double variance, Rng& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace convfuse
