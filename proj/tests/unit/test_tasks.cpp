#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tempo/core/error.hpp"
#include "tempo/core/rng.hpp"
#include "tempo/tasks/tasks.hpp"
#include "test_support.hpp"

using namespace tempo;
using namespace tempo::tasks;

namespace {

using fixtures::MemoryFeatures;
using fixtures::metas;

model::ModelConfig small_model(std::int64_t c, std::int64_t grid) {
  model::ModelConfig cfg;
  cfg.in_channels = c;
  cfg.grid_h = cfg.grid_w = grid;
  cfg.tmm = {1, 6, c};
  cfg.head = {10, 4};
  return cfg;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), 4 * a.numel()) == 0;
}

TEST(Prp, LabelsUniformAndConsistent) {
  const auto videos = metas(50);
  std::vector<std::int64_t> idx(50);
  for (std::int64_t i = 0; i < 50; ++i) idx[static_cast<std::size_t>(i)] = i;
  PRPConfig cfg;
  cfg.clips_per_video = 40;
  Rng rng(3);
  const auto plans = sample_prp_plans(cfg, videos, idx, 64, 8, 0.75, rng);
  ASSERT_EQ(plans.size(), 2000u);
  std::vector<double> counts(4, 0.0);
  for (const auto& p : plans) {
    EXPECT_EQ(cfg.rate_set[static_cast<std::size_t>(p.label)], p.rate);
    EXPECT_EQ(cfg.label_of(p.rate), p.label);
    EXPECT_GE(p.start, 0);
    EXPECT_LE(p.start + (p.length - 1) * p.rate, 63);
    EXPECT_EQ(p.crop_w, 6);
    EXPECT_GE(p.crop_x, 0);
    EXPECT_LE(p.crop_x, 2);
    counts[static_cast<std::size_t>(p.label)] += 1;
  }
  double chi2 = 0;
  for (double c : counts) chi2 += (c - 500.0) * (c - 500.0) / 500.0;
  // upper 1% point of chi-square with 3 degrees of freedom
  EXPECT_LT(chi2, 11.345);
}

TEST(Prp, ConfigErrors) {
  PRPConfig cfg;
  cfg.rate_set = {1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.rate_set = {1, 4, 2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.rate_set = {1, 2};
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_THROW(cfg.label_of(3), InputError);
}

TEST(Prp, LossValues) {
  PRPConfig cfg;
  const std::vector<std::int64_t> labels{0, 3, 2};
  nn::Var<double> uniform(Tensor<double>(Shape{3, 4}, 0.7));
  EXPECT_NEAR(prp_loss(uniform, labels, cfg).value().raw()[0], std::log(4.0), 1e-12);

  Tensor<double> sure(Shape{3, 4});
  for (std::size_t n = 0; n < 3; ++n) sure.at({static_cast<std::int64_t>(n), labels[n]}) = 20.0;
  EXPECT_LT(prp_loss(nn::Var<double>(sure), labels, cfg).value().raw()[0], 1e-8);

  Rng rng(9);
  Tensor<double> z(Shape{3, 4});
  for (auto& v : z.data()) v = rng.normal(0, 3);
  double oracle = 0;
  for (std::int64_t n = 0; n < 3; ++n) {
    double s = 0;
    for (std::int64_t k = 0; k < 4; ++k) s += std::exp(z.at({n, k}));
    oracle += std::log(s) - z.at({n, labels[static_cast<std::size_t>(n)]});
  }
  EXPECT_NEAR(prp_loss(nn::Var<double>(z), labels, cfg).value().raw()[0], oracle / 3.0, 1e-6);

  EXPECT_THROW(prp_loss(nn::Var<double>(Tensor<double>(Shape{3, 3})), labels, cfg), InputError);
  const std::vector<std::int64_t> bad{0, 4, 1};
  EXPECT_THROW(prp_loss(uniform, bad, cfg), std::exception);
}

TEST(Batch, AssembleMatchesManualSliceAndSfu) {
  const auto videos = metas(3);
  MemoryFeatures provider(videos, {8, 4, 4}, 20, 1);
  const std::vector<ClipPlan> plans{{0, 1, 2, 5, 1, 3, 0}, {2, 0, 4, 5, 0, 3, 1}};
  const auto x = assemble_features(provider, videos, plans);
  ASSERT_EQ(x.shape(), (Shape{2, 8, 5, 4, 3}));
  for (std::int64_t n = 0; n < 2; ++n) {
    const auto& p = plans[static_cast<std::size_t>(n)];
    const auto& src = provider.video(videos[static_cast<std::size_t>(p.video)].id).features;
    for (std::int64_t c = 0; c < 8; ++c)
      for (std::int64_t l = 0; l < 5; ++l)
        for (std::int64_t h = 0; h < 4; ++h)
          for (std::int64_t w = 0; w < 3; ++w)
            ASSERT_EQ(x.at({n, c, l, h, w}), src.at({p.start + l * p.rate, c, h, p.crop_x + w}));
  }

  model::SFUConfig sfu{2, 4};
  const auto b = make_batch(provider, videos, plans, sfu);
  const auto direct =
      model::sfu_channel_compress(model::sfu_spatial_compress(nn::Var<float>(x), 2), 1, 4).value();
  EXPECT_TRUE(bit_equal(b.features, direct));
  EXPECT_EQ(b.labels, (std::vector<std::int64_t>{0, 1}));

  const std::vector<ClipPlan> outside{{0, 0, 1, 3, 2, 3, 0}};
  EXPECT_THROW(assemble_features(provider, videos, outside), InputError);
  const std::vector<ClipPlan> past_end{{0, 15, 2, 5, 0, 4, 0}};
  EXPECT_THROW(assemble_features(provider, videos, past_end), InputError);
}

TEST(Eval, PlanGeometry) {
  EvalConfig cfg;
  const auto plans = eval_plans(7, 64, 8, cfg);
  ASSERT_EQ(plans.size(), 30u);
  std::vector<std::int64_t> starts, xs;
  for (const auto& p : plans) {
    EXPECT_EQ(p.video, 7);
    EXPECT_EQ(p.rate, 1);
    EXPECT_EQ(p.length, 8);
    EXPECT_EQ(p.crop_w, 6);
    if (std::find(starts.begin(), starts.end(), p.start) == starts.end()) starts.push_back(p.start);
    if (std::find(xs.begin(), xs.end(), p.crop_x) == xs.end()) xs.push_back(p.crop_x);
  }
  // round(i * 56 / 9)
  EXPECT_EQ(starts, (std::vector<std::int64_t>{0, 6, 12, 19, 25, 31, 37, 44, 50, 56}));
  EXPECT_EQ(xs, (std::vector<std::int64_t>{0, 1, 2}));

  // full-width crop leaves one spatial position
  EXPECT_EQ(eval_plans(0, 64, 1, cfg).size(), 10u);
  cfg.crop_fraction = 1.0;
  EXPECT_EQ(eval_plans(0, 64, 8, cfg).size(), 10u);

  // short videos fall back to one full-length view per crop
  const auto short_plans = eval_plans(0, 5, 8, EvalConfig{});
  ASSERT_EQ(short_plans.size(), 3u);
  EXPECT_EQ(short_plans[0].length, 5);
  EXPECT_EQ(eval_plans(0, 64, 8, cfg), eval_plans(0, 64, 8, cfg));
}

TEST(Eval, AverageViews) {
  Rng rng(4);
  Tensor<float> logits(Shape{5, 4});
  for (auto& v : logits.data()) v = static_cast<float>(rng.normal(0, 2));
  const auto p = average_views(logits);
  EXPECT_EQ(p.views, 5);
  std::vector<double> oracle(4, 0.0);
  for (std::int64_t n = 0; n < 5; ++n) {
    double z = 0;
    for (std::int64_t k = 0; k < 4; ++k) z += std::exp(double(logits.at({n, k})));
    for (std::int64_t k = 0; k < 4; ++k) oracle[static_cast<std::size_t>(k)] += std::exp(double(logits.at({n, k}))) / z / 5;
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(p.probs[k], oracle[k], 1e-12);
  EXPECT_EQ(p.label, std::max_element(oracle.begin(), oracle.end()) - oracle.begin());

  // duplicating every view changes nothing, neither does reordering
  Tensor<float> twice(Shape{10, 4});
  Tensor<float> reversed(Shape{5, 4});
  for (std::int64_t n = 0; n < 5; ++n)
    for (std::int64_t k = 0; k < 4; ++k) {
      twice.at({n, k}) = twice.at({n + 5, k}) = logits.at({n, k});
      reversed.at({4 - n, k}) = logits.at({n, k});
    }
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(average_views(twice).probs[k], p.probs[k], 1e-12);
    EXPECT_NEAR(average_views(reversed).probs[k], p.probs[k], 1e-12);
  }
}

TEST(Eval, SingleViewEqualsOneClip) {
  const auto videos = metas(2);
  MemoryFeatures provider(videos, {8, 4, 4}, 12, 2);
  model::Model<float> m(small_model(8, 4), 5);
  EvalConfig cfg{1, 1, 8, 1.0};
  const auto pred = multiview_predict(m, provider, videos, 1, 12, cfg);
  const std::vector<ClipPlan> one{{1, 2, 1, 8, 0, 4, 0}};
  const auto logits = m.forward(nn::Var<float>(assemble_features(provider, videos, one)), false).value();
  const auto probs = nn::softmax_rows(logits);
  EXPECT_EQ(pred.views, 1);
  for (std::int64_t k = 0; k < 4; ++k) EXPECT_NEAR(pred.probs[static_cast<std::size_t>(k)], probs.at({0, k}), 1e-6);
}

TEST(Eval, ThirtyViewsMatchExplicitLoop) {
  const auto videos = metas(2);
  MemoryFeatures provider(videos, {8, 8, 8}, 24, 3);
  auto mc = small_model(8, 8);
  mc.sfu.spatial = 2;
  model::Model<float> m(mc, 6);
  EvalConfig cfg;
  const auto pred = multiview_predict(m, provider, videos, 0, 24, cfg);
  EXPECT_EQ(pred.views, 30);
  std::vector<double> acc(4, 0.0);
  for (std::int64_t i = 0; i < 10; ++i) {
    const std::int64_t start = std::llround(i * 16.0 / 9.0);
    for (std::int64_t x = 0; x < 3; x++) {
      const std::vector<ClipPlan> one{{0, start, 1, 8, x, 6, 0}};
      const auto f = model::sfu_spatial_compress(nn::Var<float>(assemble_features(provider, videos, one)), 2);
      const auto probs = nn::softmax_rows(m.forward_compressed(f, false).value());
      for (std::int64_t k = 0; k < 4; ++k) acc[static_cast<std::size_t>(k)] += probs.at({0, k}) / 30.0;
    }
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(pred.probs[k], acc[k], 1e-6);
}

TEST(Eval, AccuracyOfConstantModel) {
  const auto videos = metas(20);
  MemoryFeatures provider(videos, {8, 4, 4}, 64, 4);
  auto mc = small_model(8, 4);
  mc.aggregator = model::Aggregator::AveragePooling;
  model::Model<float> m(mc, 1);
  for (auto* p : m.head_parameters()) p->value().fill(0.0f);
  m.head().fc2_b.value().raw()[2] = 1.0f;
  std::vector<std::int64_t> all(20);
  for (std::int64_t i = 0; i < 20; ++i) all[static_cast<std::size_t>(i)] = i;
  // appearance label i % 4 equals 2 for a quarter of the videos
  EXPECT_DOUBLE_EQ(evaluate_accuracy(m, provider, videos, all, Task::Appearance, 64, EvalConfig{}), 0.25);
  // motion label (i / 2) % 3
  std::int64_t hits = 0;
  for (auto i : all) hits += (i / 2) % 3 == 2;
  EXPECT_DOUBLE_EQ(evaluate_accuracy(m, provider, videos, all, Task::Motion, 64, EvalConfig{}), hits / 20.0);
  EXPECT_THROW(evaluate_accuracy(m, provider, videos, {}, Task::Motion, 64, EvalConfig{}), InputError);
  EXPECT_THROW(evaluate_prp(m, provider, videos, {}, PRPConfig{}, 64, 0.75, 0), InputError);
  // four clips per video, one for each rate
  EXPECT_EQ(evaluate_prp(m, provider, videos, all, PRPConfig{}, 64, 0.75, 0), 0.25);
}

TEST(Eval, PrpEvalDeterministic) {
  const auto videos = metas(6);
  MemoryFeatures provider(videos, {8, 4, 4}, 64, 5);
  model::Model<float> m(small_model(8, 4), 2);
  const std::vector<std::int64_t> idx{0, 1, 2, 3, 4, 5};
  EXPECT_EQ(evaluate_prp(m, provider, videos, idx, PRPConfig{}, 64, 0.75, 7),
            evaluate_prp(m, provider, videos, idx, PRPConfig{}, 64, 0.75, 7));
}

TEST(Metrics, DeltaAndReport) {
  EXPECT_NEAR(delta_acc(0.86, 0.84), 0.02, 1e-12);
  EXPECT_NEAR(86.81 + 1.79, 88.60, 1e-9);
  const auto r = MetricsReport::paired(0.9, 0.85);
  EXPECT_NEAR(r.delta_acc, 0.05, 1e-12);
  const auto j = r.to_json();
  EXPECT_DOUBLE_EQ(j["acc_ft"].get<double>(), 0.9);
  EXPECT_TRUE(j.contains("per_epoch_losses"));
  EXPECT_EQ(parse_task("motion"), Task::Motion);
  EXPECT_THROW(parse_task("colour"), ConfigError);
  EXPECT_EQ(crop_width(8, 0.75), 6);
  EXPECT_EQ(crop_width(5, 0.75), 4);
  EXPECT_EQ(crop_width(1, 0.75), 1);
}

TEST(Metrics, SplitIndices) {
  const auto videos = metas(10);
  EXPECT_EQ(split_indices(videos, data::Split::Val), (std::vector<std::int64_t>{0, 5}));
  EXPECT_EQ(split_indices(videos, data::Split::Train).size(), 8u);
}

}  // namespace
