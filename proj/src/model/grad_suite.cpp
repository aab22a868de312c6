#include "tempo/model/grad_suite.hpp"

#include <map>
#include <span>
#include <string>

#include "tempo/core/rng.hpp"
#include "tempo/model/model.hpp"
#include "tempo/nn/ops.hpp"

namespace tempo::model {

using nn::GradCheckResult;
using nn::Var;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

struct Suite {
  std::uint64_t seed;
  std::map<std::string, GradCheckResult> worst;
  std::vector<std::string> order;

  Var<double> leaf(Shape s, double scale = 1.0) { return Var<double>(randn(std::move(s), seed++, scale), true); }

  void keep(GradCheckResult r) {
    auto it = worst.find(r.name);
    if (it == worst.end()) {
      order.push_back(r.name);
      worst.emplace(r.name, std::move(r));
    } else if (r.max_rel_err > it->second.max_rel_err || !r.passed()) {
      const auto n = it->second.coords_checked + r.coords_checked;
      it->second = std::move(r);
      it->second.coords_checked = n;
    } else {
      it->second.coords_checked += r.coords_checked;
    }
  }

  // Random projection to a scalar.
  void op(const std::string& name, std::vector<Var<double>> leaves, const std::function<Var<double>()>& out,
          nn::GradCheckOptions opts = {}) {
    const auto probe = out().value();
    if (probe.shape().empty()) {
      keep(nn::check_gradients(name, leaves, out, opts));
      return;
    }
    const auto w = randn(probe.shape(), seed++);
    keep(nn::check_gradients(name, leaves, [&] { return nn::dot_const(out(), w); }, opts));
  }
};

}  // namespace

std::vector<GradCheckResult> gradient_suite(std::uint64_t seed) {
  Suite s{seed * 1000 + 1, {}, {}};

  for (const auto& [xs, ws] : std::vector<std::pair<Shape, Shape>>{{{1, 2, 3, 4, 4}, {2, 2, 3, 3, 3}},
                                                                   {{2, 3, 4, 3, 3}, {4, 3, 3, 1, 1}},
                                                                   {{2, 2, 2, 3, 4}, {3, 2, 1, 3, 3}}}) {
    auto x = s.leaf(xs), w = s.leaf(ws), b = s.leaf({ws[0]});
    s.op("conv3d", {x, w, b}, [&] { return nn::conv3d(x, w, b); });
  }
  for (const auto& [xs, dout] : std::vector<std::pair<Shape, std::int64_t>>{{{3, 4}, 5}, {{2, 3, 6}, 2}, {{1, 1}, 3}}) {
    auto x = s.leaf(xs), w = s.leaf({dout, xs.back()}), b = s.leaf({dout});
    s.op("linear", {x, w, b}, [&] { return nn::linear(x, w, b); });
  }
  for (const Shape& sh : {Shape{7}, Shape{2, 3, 4}, Shape{2, 2, 3, 2, 2}}) {
    auto x = s.leaf(sh), y = s.leaf(sh);
    const std::vector<int> axes{static_cast<int>(sh.size()) - 1};
    s.op("relu", {x}, [&] { return nn::relu(x); });
    s.op("add", {x, y}, [&] { return nn::add(x, y); });
    s.op("mul", {x, y}, [&] { return nn::mul(x, y); });
    s.op("scale", {x}, [&] { return nn::scale(x, 0.37); });
    s.op("sum", {x}, [&] { return nn::sum(x); });
    s.op("mean_axes", {x}, [&] { return nn::mean_axes(x, axes); });
  }
  for (const Shape& sh : {Shape{1, 2, 3, 4, 4}, Shape{2, 3, 2, 5, 5}, Shape{1, 1, 4, 8, 8}}) {
    auto x = s.leaf(sh);
    s.op("mean_over_time", {x}, [&] { return nn::mean_over_time(x); });
    s.op("global_avg_pool", {x}, [&] { return nn::global_avg_pool(x); });
    s.op("adaptive_avg_pool2d", {x}, [&] { return nn::adaptive_avg_pool2d(x, 3, 2); });
    s.op("channel_group_mean", {x}, [&] { return nn::channel_group_mean(x, 1, 1); });
  }
  {
    auto x = s.leaf({1, 4, 2, 3, 3});
    s.op("channel_group_mean", {x}, [&] { return nn::channel_group_mean(x, 1, 2); });
  }
  for (const auto& [n, k] : std::vector<std::pair<std::int64_t, std::int64_t>>{{1, 2}, {4, 4}, {6, 9}}) {
    auto x = s.leaf({n, k}, 2.0);
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < n; ++i) labels.push_back(i % k);
    s.op("softmax_cross_entropy", {x}, [&] { return nn::softmax_cross_entropy(x, std::span<const std::int64_t>(labels)); });
  }
  for (const Shape& sh : {Shape{2, 3, 2, 2, 2}, Shape{4, 2, 1, 3, 3}, Shape{1, 4, 3, 2, 2}}) {
    auto x = s.leaf(sh, 2.0), g = s.leaf({sh[1]}), b = s.leaf({sh[1]});
    nn::BatchNormState<double> st(sh[1]);
    s.op("batchnorm3d.train", {x, g, b}, [&] { return nn::batchnorm3d(x, g, b, st, true); });
    s.op("batchnorm3d.eval", {x, g, b}, [&] { return nn::batchnorm3d(x, g, b, st, false); });
  }

  for (bool train : {true, false}) {
    R3DBlock<double> blk("b", 3, 4, s.seed++);
    for (auto* g : {&blk.bn1_gamma, &blk.bn2_gamma, &blk.bn3_gamma}) {
      g->value() = randn(g->value().shape(), s.seed++, 0.5);
      for (auto& v : g->value().data()) v += 1.0;
    }
    blk.bn1.running_var.fill(1.3);
    auto x = s.leaf({2, 3, 3, 2, 3});
    std::vector<Var<double>> leaves{x};
    for (auto* p : blk.parameters()) leaves.push_back(p->var());
    s.op(train ? "r3d_block.train" : "r3d_block.eval", leaves, [&] { return blk.forward(x, train); });
  }
  {
    MLPHead<double> head("h", 4, 6, 3, s.seed++);
    auto x = s.leaf({2, 4, 3, 2, 2});
    std::vector<Var<double>> leaves{x};
    for (auto* p : head.parameters()) leaves.push_back(p->var());
    s.op("mlp_head", leaves, [&] { return head.forward(x); });
  }
  {
    ModelConfig cfg;
    cfg.in_channels = 8;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.sfu.spatial = 3;
    cfg.sfu.channels = 4;
    cfg.tmm = {2, 5, 4};
    cfg.head = {10, 3};
    Model<double> m(cfg, s.seed++);
    Var<double> x(randn({3, 8, 4, 4, 4}, s.seed++));
    const std::vector<std::int64_t> labels{0, 2, 1};
    nn::GradCheckOptions opts;
    opts.max_coords = 20;
    opts.tolerance = 1e-3;
    opts.seed = s.seed++;
    std::vector<Var<double>> leaves;
    for (auto* p : m.parameters()) leaves.push_back(p->var());
    s.keep(nn::check_gradients("model (20 coords)", leaves, [&] {
      return nn::softmax_cross_entropy(m.forward(x, true), std::span<const std::int64_t>(labels));
    }, opts));
  }

  std::vector<GradCheckResult> out;
  for (const auto& name : s.order) out.push_back(s.worst.at(name));
  return out;
}

}  // namespace tempo::model
