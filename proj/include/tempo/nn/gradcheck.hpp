#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tempo/core/rng.hpp"
#include "tempo/nn/autograd.hpp"

namespace tempo::nn {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  double tolerance = 0.0;
  // Worst coordinate seen.
  std::size_t worst_leaf = 0;
  std::int64_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed() const { return max_rel_err < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-6;        // central-difference half step
  double tolerance = 1e-4;   // on max relative error
  double rel_floor = 1e-5;   // denominators below this are clamped
  std::int64_t max_coords = 0;  // 0 = every coordinate of every leaf
  std::uint64_t seed = 0;    // coordinate sampling when max_coords > 0
};

// Compares the reverse-mode gradient of `loss_fn` with respect to each leaf
// against central finite differences of the same function. The loss function
// must rebuild the graph from the current leaf values on every call.
GradCheckResult check_gradients(const std::string& name,
                                const std::vector<Var<double>>& leaves,
                                const std::function<Var<double>()>& loss_fn,
                                const GradCheckOptions& opts = {});

}  // namespace tempo::nn
