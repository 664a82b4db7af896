#pragma once

#include <cstdint>
#include <string_view>

#include "occmesh/tensor.hpp"

namespace occmesh {

// Uniform(-bound, bound) leaf whose values depend only on (seed, name), so a
// parameter initializes identically whatever else the model contains.
Tensor uniform_param(const Shape& shape, double bound, std::uint64_t seed, std::string_view name);

}  // namespace occmesh
