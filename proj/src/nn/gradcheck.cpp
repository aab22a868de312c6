#include "tempo/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tempo::nn {

GradCheckResult check_gradients(const std::string& name, const std::vector<Var<double>>& leaves,
                                const std::function<Var<double>()>& loss_fn,
                                const GradCheckOptions& opts) {
  for (const auto& leaf : leaves) {
    if (!leaf.requires_grad()) throw ConfigError("gradcheck leaf without requires_grad: " + name);
    leaf.node()->grad_buffer().fill(0.0);
  }
  backward(loss_fn());
  std::vector<Tensor<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.node()->grad_buffer());

  // (leaf, flat index) pairs to probe.
  std::vector<std::pair<std::size_t, std::int64_t>> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::int64_t i = 0; i < leaves[l].value().numel(); ++i) coords.emplace_back(l, i);
  }
  if (opts.max_coords > 0 && static_cast<std::int64_t>(coords.size()) > opts.max_coords) {
    Rng rng(opts.seed, "gradcheck-coords");
    std::shuffle(coords.begin(), coords.end(), rng.engine());
    coords.resize(static_cast<std::size_t>(opts.max_coords));
  }

  GradCheckResult result;
  result.name = name;
  result.tolerance = opts.tolerance;
  for (auto [l, i] : coords) {
    double& v = leaves[l].node()->value[i];
    const double saved = v;
    v = saved + opts.step;
    const double plus = loss_fn().value().item();
    v = saved - opts.step;
    const double minus = loss_fn().value().item();
    v = saved;
    const double numeric = (plus - minus) / (2.0 * opts.step);
    const double a = analytic[l][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.rel_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel >= result.max_rel_err) {
      result.max_rel_err = rel;
      result.worst_leaf = l;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
    ++result.coords_checked;
  }
  return result;
}

}  // namespace tempo::nn
