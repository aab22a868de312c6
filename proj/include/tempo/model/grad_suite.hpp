#pragma once

#include <cstdint>
#include <vector>

#include "tempo/nn/gradcheck.hpp"

namespace tempo::model {

// fp64 central-difference checks for every differentiable op (several shapes
// each, worst case kept), the R3D block, the head and the composite model
// (20 sampled coordinates, tolerance 1e-3).
std::vector<nn::GradCheckResult> gradient_suite(std::uint64_t seed = 0);

}  // namespace tempo::model
