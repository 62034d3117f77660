#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "dfmad/tensor.hpp"

namespace dfmad {

using Rng = std::mt19937_64;

// Mixes a base seed with stream identifiers (splitmix64) so that every sample,
// branch, or epoch gets an independent, reproducible stream.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream);

Tensor randn(Shape shape, double stddev, Rng& rng);
Tensor uniform(Shape shape, double lo, double hi, Rng& rng);

} // namespace dfmad
