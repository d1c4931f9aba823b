// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "convfuse/tensor.hpp"

namespace convfuse {

using Rng = std::mt19937_64;

/// Stable sub-seed for a named component, independent of construction order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

/// Entries drawn i.i.d. from N(0, variance).
Tensor gaussian(const Shape& shape, double variance, Rng& rng);

}  // namespace convfuse
