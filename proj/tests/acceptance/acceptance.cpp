// Acceptance suite: one PASS/FAIL line per criterion.
//
//   tempo_acceptance [criterion...]    (no argument: every criterion)
//
// Training runs are cached under $TEMPO_ACCEPTANCE_DIR (default
// ./acceptance_runs), so criteria sharing runs only pay for them once.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "tempo/core/error.hpp"
#include "tempo/core/log.hpp"
#include "tempo/core/rng.hpp"
#include "tempo/costmodel/costmodel.hpp"
#include "tempo/model/checkpoint.hpp"
#include "tempo/model/grad_suite.hpp"
#include "tempo/trainer/experiment.hpp"

namespace fs = std::filesystem;
using namespace tempo;
using nlohmann::json;

namespace {

// ---- pinned tolerances -----------------------------------------------------
constexpr double kOpGradTol = 1e-4;
constexpr double kModelGradTol = 1e-3;
constexpr double kGradSeconds = 120.0;
constexpr double kSpatialRatioTol = 0.01;
constexpr double kChannelAffineTol = 0.005;
constexpr double kTable3AbsTol = 0.40;
constexpr int kRandomConfigs = 24;
constexpr double kPrpThreshold = 0.50;
constexpr double kPoolingPrpBand = 0.10;
constexpr double kTmmGap = 0.10;
constexpr double kPoolPermTol = 1e-5;   // fp32 summation-order rounding
constexpr double kTmmPermMin = 1e-3;
constexpr std::int64_t kDeterminismSteps = 10;
constexpr std::int64_t kResumeSteps = 20;
constexpr std::int64_t kResumeSplit = 10;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pct(double v) { return fmt("%.1f", 100.0 * v); }

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + pct(v[i]);
  return s + "]";
}

fs::path root_dir() {
  const char* env = std::getenv("TEMPO_ACCEPTANCE_DIR");
  return env && *env ? fs::path(env) : fs::path("acceptance_runs");
}

// Desk default configuration.
trainer::RunConfig base(std::uint64_t seed) {
  trainer::RunConfig c;
  c.seed = seed;
  c.out_dir = (root_dir() / "runs").string();
  c.cache_dir = (root_dir() / "cache").string();
  return trainer::RunConfig::from_json(c.to_json());
}

trainer::RunResult run(const trainer::RunConfig& cfg, const std::string& sweep) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = trainer::run_point(cfg, sweep);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "  run " << sweep << " " << trainer::config_hash(cfg) << "/" << cfg.seed << " ft " << pct(r.metrics.acc_ft)
            << " scratch " << pct(r.metrics.acc_scratch) << (r.cached ? " (cached)" : " (" + fmt("%.0f", s) + " s)")
            << "\n";
  return r;
}

trainer::RunConfig with_task(trainer::RunConfig c, tasks::Task t) {
  c.task = t;
  return c;
}

// ---- criteria --------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = model::gradient_suite(0);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double op_worst = 0, model_worst = 0;
  std::string worst_name, failed;
  bool ok = true;
  for (const auto& r : results) {
    const bool composite = r.name.rfind("model", 0) == 0;
    const double tol = composite ? kModelGradTol : kOpGradTol;
    if (!(r.max_rel_err < tol)) {
      ok = false;
      failed += " " + r.name;
    }
    if (composite) {
      model_worst = std::max(model_worst, r.max_rel_err);
    } else if (r.max_rel_err >= op_worst) {
      op_worst = r.max_rel_err;
      worst_name = r.name;
    }
  }
  ok = ok && s < kGradSeconds;
  return {ok, std::to_string(results.size()) + " checks; worst op " + worst_name + " " + fmt("%.2e", op_worst) +
                  " < 1e-4; composite " + fmt("%.2e", model_worst) + " < 1e-3; " + fmt("%.2f", s) + " s < 120 s" +
                  (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome cost_table2() {
  using namespace costmodel;
  const auto base_cfg = paper_base_config(2048);
  const auto& sp = table2_spatial();
  const double ref = cost(base_cfg, paper_input()).tmm_conv_flops();
  double worst_ratio = 0;
  for (std::size_t i = 0; i < sp.values.size(); ++i) {
    const double ours = cost(apply_axis(base_cfg, Axis::SpatialResolution, sp.values[i]), paper_input()).tmm_conv_flops() / ref;
    const double s = static_cast<double>(sp.values[i]);
    if (std::abs(ours - (s / 14) * (s / 14)) > 1e-12) return {false, "conv FLOPs not proportional to H*W"};
    worst_ratio = std::max(worst_ratio, std::abs(sp.flops_g[i] / sp.flops_g[0] / ours - 1.0));
  }
  const auto& ch = table2_channels();
  std::vector<double> x(ch.values.begin(), ch.values.end()), ours;
  for (auto c : ch.values) ours.push_back(cost(apply_axis(base_cfg, Axis::ChannelDim, c), paper_input()).tmm_conv_flops());
  const double ours_res = affine_fit_max_rel_residual(x, ours);
  const double paper_res = affine_fit_max_rel_residual(x, ch.flops_g);
  const bool ok = worst_ratio < kSpatialRatioTol && ours_res < kChannelAffineTol && paper_res < kChannelAffineTol;
  return {ok, "spatial ratio vs published max dev " + fmt("%.3f", 100 * worst_ratio) + "% < 1%; channel affine residual ours " +
                  fmt("%.1e", ours_res) + ", published " + fmt("%.3f", 100 * paper_res) + "% < 0.5%"};
}

Outcome cost_table3() {
  using namespace costmodel;
  const auto base_cfg = paper_base_config(256);
  const auto in = paper_input();
  // exact affinity in blocks
  bool affine = true;
  std::int64_t dp = -1;
  double df = -1;
  for (std::int64_t n = 1; n <= 8; ++n) {
    const auto a = cost(apply_axis(base_cfg, Axis::Blocks, n), in), b = cost(apply_axis(base_cfg, Axis::Blocks, n - 1), in);
    const std::int64_t p = a.trainable_params - b.trainable_params;
    const double f = a.total_flops() - b.total_flops();
    if (dp >= 0 && (p != dp || f != df)) affine = false;
    dp = p;
    df = f;
  }
  bool monotone = true;
  double prev_p = 0, prev_f = 0;
  for (auto h : table3_hidden().values) {
    const auto r = cost(apply_axis(base_cfg, Axis::HiddenDim, h), in);
    monotone = monotone && r.trainable_params > prev_p && r.total_flops() > prev_f;
    prev_p = static_cast<double>(r.trainable_params);
    prev_f = r.total_flops();
  }
  // count vs enumerated parameters of built models
  Rng rng(derive_seed(7, "acceptance/configs"));
  int matched = 0;
  for (int i = 0; i < kRandomConfigs; ++i) {
    model::ModelConfig cfg;
    cfg.in_channels = std::vector<std::int64_t>{4, 6, 8, 12, 16}[static_cast<std::size_t>(rng.uniform_int(0, 4))];
    cfg.grid_h = cfg.grid_w = rng.uniform_int(1, 5);
    if (rng.uniform_int(0, 1)) cfg.sfu.spatial = rng.uniform_int(1, cfg.grid_h);
    if (rng.uniform_int(0, 1)) cfg.sfu.channels = cfg.in_channels / 2;
    cfg.tmm = {rng.uniform_int(0, 3), rng.uniform_int(1, 16), cfg.out_channels()};
    cfg.head = {rng.uniform_int(1, 24), rng.uniform_int(2, 6)};
    if (i % 6 == 5) cfg.aggregator = model::Aggregator::AveragePooling;
    model::Model<float> m(cfg, static_cast<std::uint64_t>(i));
    if (count_params(cfg).trainable_params == m.trainable_count()) ++matched;
  }
  // absolute values
  const auto band = [&](Convention conv, double& worst_p, double& worst_f, std::string& where) {
    worst_p = worst_f = 0;
    for (const PaperAxis* ax : {&table3_blocks(), &table3_hidden()}) {
      for (std::size_t i = 0; i < ax->values.size(); ++i) {
        const auto r = cost(apply_axis(base_cfg, ax->axis, ax->values[i]), in, conv);
        const double p = std::abs(static_cast<double>(r.trainable_params) / 1e6 / ax->params_m[i] - 1.0);
        const double f = std::abs(r.total_flops() / 1e9 / ax->flops_g[i] - 1.0);
        worst_p = std::max(worst_p, p);
        if (f > worst_f) {
          worst_f = f;
          where = axis_name(ax->axis) + "=" + std::to_string(ax->values[i]);
        }
      }
    }
  };
  double p2, f2, p1, f1;
  std::string w2, w1;
  band(Convention::TwoMacs, p2, f2, w2);
  band(Convention::Macs, p1, f1, w1);
  const bool abs_ok = p2 <= kTable3AbsTol && f2 <= kTable3AbsTol;
  const bool ok = affine && monotone && matched == kRandomConfigs && abs_ok;
  return {ok, std::string("blocks affine ") + (affine ? "yes" : "NO") + "; hidden monotone " + (monotone ? "yes" : "NO") +
                  "; count==built " + std::to_string(matched) + "/" + std::to_string(kRandomConfigs) +
                  "; 2*MACs max dev params " + pct(p2) + "%, FLOPs " + pct(f2) + "% at " + w2 + " (band 40%)" +
                  "; 1*MAC diagnostic: params " + pct(p1) + "%, FLOPs " + pct(f1) + "% at " + w1};
}

Outcome prp_learnability() {
  std::vector<double> acc, loss;
  for (auto seed : kSeeds) {
    const auto cfg = base(seed);
    trainer::RunData data(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto art = trainer::pretrain_cached(cfg, data);
    std::cerr << "  pretrain seed " << seed << " prp " << pct(art->val_prp_accuracy) << " ("
              << fmt("%.0f", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s)\n";
    acc.push_back(art->val_prp_accuracy);
    loss.push_back(art->log.epoch_losses.back());
  }
  const double med = median(acc);
  return {med > kPrpThreshold, "val PRP accuracy " + list(acc) + "%, median " + pct(med) + "% > 50%; final train loss " +
                                   fmt("%.3f", median(loss)) + " (ln 4 = 1.386)"};
}

Outcome prp_pooling_control() {
  std::vector<double> acc;
  bool ok = true;
  for (auto seed : kSeeds) {
    auto cfg = base(seed);
    cfg.aggregator = model::Aggregator::AveragePooling;
    trainer::RunData data(cfg);
    const auto art = trainer::pretrain_cached(cfg, data);
    acc.push_back(art->val_prp_accuracy);
    ok = ok && std::abs(art->val_prp_accuracy - 0.25) <= kPoolingPrpBand;
  }
  return {ok, "average-pooling PRP accuracy " + list(acc) + "%, each within 10 points of 25%"};
}

Outcome delta_acc() {
  std::vector<double> d60, d20;
  int ordered = 0;
  for (auto seed : kSeeds) {
    const auto r60 = run(base(seed), "main");
    auto c20 = base(seed);
    c20.pretrain.epochs = 20;
    const auto r20 = run(c20, "pretrain20");
    d60.push_back(r60.metrics.delta_acc);
    d20.push_back(r20.metrics.delta_acc);
    if (r60.metrics.delta_acc >= r20.metrics.delta_acc) ++ordered;
  }
  const bool ok = mean(d60) > 0 && ordered >= 2;
  return {ok, "motion dAcc(60ep) " + list(d60) + " mean " + pct(mean(d60)) + " > 0; dAcc(20ep) " + list(d20) +
                  "; 60ep >= 20ep in " + std::to_string(ordered) + "/3 seeds (need 2)"};
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

// Reverses the time axis of (N, C, T, H, W).
Tensor<float> reverse_time(const Tensor<float>& x) {
  Tensor<float> y(x.shape());
  const auto n = x.dim(0), c = x.dim(1), t = x.dim(2), hw = x.dim(3) * x.dim(4);
  for (std::int64_t a = 0; a < n * c; ++a)
    for (std::int64_t k = 0; k < t; ++k)
      std::copy_n(x.data().data() + (a * t + k) * hw, hw, y.data().data() + (a * t + (t - 1 - k)) * hw);
  return y;
}

Outcome tmm_vs_pooling() {
  std::vector<double> tmm_m, pool_m, tmm_a, pool_a;
  trainer::RunResult first;
  for (auto seed : kSeeds) {
    const auto t = run(base(seed), "main");
    if (seed == kSeeds.front()) first = t;
    tmm_m.push_back(t.metrics.acc_ft);
    auto p = base(seed);
    p.aggregator = model::Aggregator::AveragePooling;
    pool_m.push_back(run(p, "pooling").metrics.acc_ft);
    tmm_a.push_back(run(with_task(base(seed), tasks::Task::Appearance), "main").metrics.acc_ft);
    pool_a.push_back(run(with_task(p, tasks::Task::Appearance), "pooling").metrics.acc_ft);
  }
  const double gap = mean(tmm_m) - mean(pool_m);

  // permutation check on real features
  const auto cfg = base(kSeeds.front());
  trainer::RunData data(cfg);
  const auto mcfg = data.model_config(cfg);
  const auto& ctx = data.context();
  const auto val = ctx.val_indices();
  std::vector<tasks::ClipPlan> plans;
  for (std::size_t i = 0; i < 4 && i < val.size(); ++i) {
    plans.push_back({static_cast<std::int64_t>(val[i]), 5, 1, cfg.eval.clip_length, 0, ctx.grid_w, 0});
  }
  const auto batch = tasks::make_batch(*ctx.provider, ctx.videos, plans, mcfg.sfu);
  model::Model<float> trained(mcfg, 0);
  model::load_state_dict(trained, model::load_checkpoint(first.dir / "checkpoints" / "ft" / "latest").tensors);
  auto pcfg = mcfg;
  pcfg.aggregator = model::Aggregator::AveragePooling;
  model::Model<float> pooled(pcfg, 3);
  const auto rev = reverse_time(batch.features);
  const auto out = [&](model::Model<float>& m, const Tensor<float>& x) {
    return m.forward_compressed(nn::Var<float>(x), false).value();
  };
  const double pool_diff = max_abs_diff(out(pooled, batch.features), out(pooled, rev));
  const double tmm_diff = max_abs_diff(out(trained, batch.features), out(trained, rev));

  const bool ok = gap >= kTmmGap && pool_diff <= kPoolPermTol && tmm_diff > kTmmPermMin;
  return {ok, "motion TMM " + list(tmm_m) + " vs pooling " + list(pool_m) + ": gap " + pct(gap) +
                  " pts >= 10; appearance gap " + pct(mean(tmm_a) - mean(pool_a)) + " pts (TMM " + list(tmm_a) +
                  ", pooling " + list(pool_a) + "); T-reversal |dlogit| pooling " + fmt("%.1e", pool_diff) +
                  ", trained TMM " + fmt("%.2e", tmm_diff)};
}

Outcome sfu_direction() {
  std::vector<double> full_m, full_a, s1_m, c4_m, c4_a;
  for (auto seed : kSeeds) {
    full_m.push_back(run(base(seed), "main").metrics.acc_ft);
    full_a.push_back(run(with_task(base(seed), tasks::Task::Appearance), "main").metrics.acc_ft);
    auto s1 = base(seed);
    s1.sfu.spatial = 1;
    s1_m.push_back(run(s1, "sfu").metrics.acc_ft);
    auto c4 = base(seed);
    c4.sfu.channels = c4.stub.feature_dim / 16;
    c4_m.push_back(run(c4, "sfu").metrics.acc_ft);
    c4_a.push_back(run(with_task(c4, tasks::Task::Appearance), "sfu").metrics.acc_ft);
  }
  const bool s1_ok = mean(s1_m) < mean(full_m);
  const bool c4_ok = mean(c4_m) < mean(full_m) && mean(c4_a) < mean(full_a);
  return {s1_ok && c4_ok, "motion Acc_ft uncompressed " + pct(mean(full_m)) + " vs s=1 " + pct(mean(s1_m)) + " vs c=C/16 " +
                              pct(mean(c4_m)) + "; appearance uncompressed " + pct(mean(full_a)) + " vs c=C/16 " +
                              pct(mean(c4_a)) + " (3-seed means)"};
}

Outcome determinism_resume() {
  const auto cfg = base(11);
  trainer::RunData data(cfg);
  const auto mcfg = data.model_config(cfg);
  const fs::path dir = root_dir() / "determinism";
  fs::remove_all(dir);
  const auto once = [&](const std::string& name, std::int64_t stop, bool resume) {
    trainer::TrainOptions o{dir / name, 0, stop, resume, {}};
    return trainer::pretrain(cfg.pretrain, data.context(), mcfg, cfg.prp, o).log.step_losses;
  };
  const auto a = once("a", kDeterminismSteps, false);
  const auto b = once("b", kDeterminismSteps, false);
  const auto full = once("full", kResumeSteps, false);
  once("split", kResumeSplit, false);
  const auto resumed = once("split", kResumeSteps, true);
  const auto bits_equal = [](const std::vector<double>& x, const std::vector<double>& y) {
    return x.size() == y.size() && std::equal(x.begin(), x.end(), y.begin(), [](double p, double q) {
             return std::memcmp(&p, &q, sizeof p) == 0;
           });
  };
  const bool same = a.size() == static_cast<std::size_t>(kDeterminismSteps) && bits_equal(a, b);
  const bool res = full.size() == static_cast<std::size_t>(kResumeSteps) && bits_equal(full, resumed);
  return {same && res, std::string("first 10 losses bit-identical across runs: ") + (same ? "yes" : "NO") +
                           "; 10+10 resumed vs 20 uninterrupted bit-identical: " + (res ? "yes" : "NO")};
}

Outcome frozen_ifm() {
  trainer::RunData data(base(0));
  const auto expected = data.context().ifm_checksum();
  int phases = 0, bad = 0;
  const auto check = [&](const json& j) {
    if (!j.contains("ifm_checksum_before")) return;
    ++phases;
    if (j["ifm_checksum_before"] != expected || j["ifm_checksum_after"] != expected) ++bad;
  };
  const fs::path runs = root_dir() / "runs";
  if (fs::exists(runs)) {
    for (const auto& e : fs::recursive_directory_iterator(runs)) {
      if (!e.is_regular_file()) continue;
      const auto name = e.path().filename();
      if (name != "metrics.json" && name != "result.json") continue;
      std::ifstream in(e.path());
      const auto j = json::parse(in);
      if (name == "result.json") {
        check(j.at("log"));
      } else {
        for (const char* phase : {"pretrain", "ft", "scratch"})
          if (j.contains(phase)) check(j[phase]);
      }
    }
  }
  return {phases > 0 && bad == 0, std::to_string(phases) + " phases checked, " + std::to_string(bad) +
                                      " with a changed encoder checksum (expected " + expected + ")"};
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> c{
      {"gradient_suite", gradient_suite},
      {"cost_table2", cost_table2},
      {"cost_table3", cost_table3},
      {"determinism_resume", determinism_resume},
      {"prp_learnability", prp_learnability},
      {"prp_pooling_control", prp_pooling_control},
      {"delta_acc", delta_acc},
      {"tmm_vs_pooling", tmm_vs_pooling},
      {"sfu_direction", sfu_direction},
      {"frozen_ifm", frozen_ifm},
  };
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::Warn);
  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (wanted.empty())
    for (const auto& [name, fn] : criteria()) wanted.push_back(name);
  int failures = 0;
  for (const auto& w : wanted) {
    const auto it = std::find_if(criteria().begin(), criteria().end(), [&](const auto& c) { return c.first == w; });
    if (it == criteria().end()) {
      std::cout << "FAIL " << w << " | unknown criterion\n";
      ++failures;
      continue;
    }
    Outcome o;
    try {
      o = it->second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << w << " | " << o.detail << std::endl;
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
