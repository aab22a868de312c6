#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "tempo/core/error.hpp"
#include "tempo/trainer/trainer.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace tempo;
using namespace tempo::trainer;

namespace {

struct Fixture {
  std::vector<data::VideoMeta> videos = fixtures::metas(20);
  fixtures::MemoryFeatures provider{videos, {8, 4, 4}, 24, 1};
  DataContext data;
  tasks::PRPConfig prp;
  tasks::EvalConfig eval{2, 2, 3, 0.75};

  Fixture() {
    data.videos = videos;
    data.provider = &provider;
    data.frames = 24;
    data.grid_w = 4;
    prp.clip_length = 3;
  }

  static model::ModelConfig model_cfg() {
    model::ModelConfig cfg;
    cfg.in_channels = 8;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.tmm = {1, 6, 8};
    cfg.head = {10, 4};
    return cfg;
  }

  static TrainRecipe pre(std::int64_t epochs = 2) {
    auto r = TrainRecipe::pretrain_default();
    r.epochs = epochs;
    r.batch_size = 8;
    r.clip_length = 3;
    r.seed = 5;
    return r;
  }

  static TrainRecipe ft(std::int64_t epochs = 2) {
    auto r = TrainRecipe::finetune_default();
    r.epochs = epochs;
    r.batch_size = 4;
    r.clip_length = 3;
    r.seed = 5;
    return r;
  }
};

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("tempo_trainer_" + name);
  fs::remove_all(d);
  return d;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

TEST(Recipe, LearningRateAndSchedule) {
  auto r = TrainRecipe::pretrain_default();
  EXPECT_DOUBLE_EQ(r.max_lr(), 1e-2 * 32 / 64);
  EXPECT_EQ(r.videos_per_step(), 8);
  EXPECT_EQ(r.steps_per_epoch(192), 24);
  EXPECT_EQ(r.total_steps(192), 60 * 24);
  EXPECT_EQ(r.steps_per_epoch(193), 25);
  const auto f = TrainRecipe::finetune_default();
  EXPECT_EQ(f.epochs, 30);
  EXPECT_DOUBLE_EQ(f.weight_decay, 5e-3);
  EXPECT_EQ(f.steps_per_epoch(192), 6);
  EXPECT_EQ(recipe_from_json(to_json(f)).weight_decay, f.weight_decay);
  EXPECT_EQ(to_json(recipe_from_json(to_json(r))), to_json(r));
  r.batch_size = 30;
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(Plans, EpochVisitsEveryTrainVideoOnce) {
  Fixture fx;
  const auto r = Fixture::pre();
  const std::int64_t spe = r.steps_per_epoch(16);
  EXPECT_EQ(spe, 8);
  std::multiset<std::int64_t> seen;
  for (std::int64_t s = 0; s < spe; ++s) {
    const auto plans = step_plans(r, fx.data, fx.prp, tasks::Task::Motion, s);
    EXPECT_EQ(plans.size(), 8u);
    for (std::size_t i = 0; i < plans.size(); i += 4) seen.insert(plans[i].video);
    for (const auto& p : plans) EXPECT_NE(fx.videos[static_cast<std::size_t>(p.video)].split, data::Split::Val);
  }
  EXPECT_EQ(seen.size(), 16u);
  EXPECT_EQ(std::set<std::int64_t>(seen.begin(), seen.end()).size(), 16u);
  // pure function of the step
  EXPECT_EQ(step_plans(r, fx.data, fx.prp, tasks::Task::Motion, 3),
            step_plans(r, fx.data, fx.prp, tasks::Task::Motion, 3));
  EXPECT_NE(step_plans(r, fx.data, fx.prp, tasks::Task::Motion, 3),
            step_plans(r, fx.data, fx.prp, tasks::Task::Motion, 11));
}

TEST(Plans, FinetuneClipsUseTaskLabels) {
  Fixture fx;
  const auto plans = step_plans(Fixture::ft(), fx.data, fx.prp, tasks::Task::Motion, 0);
  ASSERT_EQ(plans.size(), 4u);
  for (const auto& p : plans) {
    EXPECT_EQ(p.rate, 1);
    EXPECT_EQ(p.label, fx.videos[static_cast<std::size_t>(p.video)].motion_label);
    EXPECT_EQ(p.crop_w, 3);
  }
}

TEST(Pretrain, ZeroEpochsKeepsInitialisation) {
  Fixture fx;
  const auto dir = fresh_dir("zero");
  auto res = pretrain(Fixture::pre(0), fx.data, Fixture::model_cfg(), fx.prp, {dir});
  EXPECT_TRUE(res.log.step_losses.empty());
  EXPECT_EQ(res.log.steps, 0);
  model::Model<float> init(prp_model_config(Fixture::model_cfg(), fx.prp), derive_seed(5, "init"));
  const auto a = model::state_dict(*res.model);
  const auto b = model::state_dict(init);
  for (const auto& [k, v] : b) EXPECT_EQ(a.at(k), v) << k;
  EXPECT_TRUE(fs::exists(dir / "latest" / "manifest.json"));
}

TEST(Pretrain, SameSeedSameLosses) {
  Fixture fx;
  const auto r = Fixture::pre(2);
  const auto a = pretrain(r, fx.data, Fixture::model_cfg(), fx.prp);
  const auto b = pretrain(r, fx.data, Fixture::model_cfg(), fx.prp);
  ASSERT_GE(a.log.step_losses.size(), 10u);
  EXPECT_TRUE(same_bits(a.log.step_losses, b.log.step_losses));
  EXPECT_EQ(a.log.data_digest, b.log.data_digest);
  EXPECT_EQ(a.log.epoch_losses.size(), 2u);
  auto r2 = r;
  r2.seed = 6;
  EXPECT_FALSE(same_bits(a.log.step_losses, pretrain(r2, fx.data, Fixture::model_cfg(), fx.prp).log.step_losses));
}

TEST(Pretrain, ResumeReplaysUninterruptedRun) {
  Fixture fx;
  const auto r = Fixture::pre(2);
  const auto full = pretrain(r, fx.data, Fixture::model_cfg(), fx.prp);

  const auto dir = fresh_dir("resume");
  TrainOptions first{dir, 0, 5, true, {}};
  const auto part = pretrain(r, fx.data, Fixture::model_cfg(), fx.prp, first);
  EXPECT_EQ(part.log.steps, 5);
  TrainOptions second{dir, 0, -1, true, {}};
  const auto rest = pretrain(r, fx.data, Fixture::model_cfg(), fx.prp, second);
  EXPECT_TRUE(rest.log.resumed);
  EXPECT_TRUE(same_bits(rest.log.step_losses, full.log.step_losses));
  EXPECT_EQ(rest.log.data_digest, full.log.data_digest);
  const auto a = model::state_dict(*rest.model);
  const auto b = model::state_dict(*full.model);
  for (const auto& [k, v] : b) EXPECT_EQ(a.at(k), v) << k;
}

TEST(Pretrain, ResumeRejectsOtherRecipe) {
  Fixture fx;
  const auto dir = fresh_dir("other");
  pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp, {dir});
  EXPECT_THROW(pretrain(Fixture::pre(2), fx.data, Fixture::model_cfg(), fx.prp, {dir}), ConfigError);
}

TEST(Pretrain, LossLogHasOneLinePerStep) {
  Fixture fx;
  const auto log = fs::temp_directory_path() / "tempo_trainer_loss.jsonl";
  TrainOptions o;
  o.loss_log = log;
  pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp, o);
  std::ifstream in(log);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), n);
    ++n;
  }
  EXPECT_EQ(n, 8);
}

TEST(Pretrain, PoolingAggregatorTrainsHeadOnly) {
  Fixture fx;
  auto cfg = Fixture::model_cfg();
  cfg.aggregator = model::Aggregator::AveragePooling;
  const auto r = pretrain(Fixture::pre(1), fx.data, cfg, fx.prp);
  EXPECT_TRUE(extract_tmm(*r.model).state.empty());
  EXPECT_GE(r.val_prp_accuracy, 0.0);
  EXPECT_LE(r.val_prp_accuracy, 1.0);
}

TEST(Pretrain, NonFiniteLossReportsDiagnostics) {
  Fixture fx;
  for (const auto& v : fx.videos) fx.provider.mutable_video(v.id).features.data()[0] = NAN;
  try {
    pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("diverged at step"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr"), std::string::npos);
    EXPECT_NE(msg.find("|grad|"), std::string::npos);
  }
}

TEST(Pretrain, ChangedEncoderIsFatal) {
  Fixture fx;
  int calls = 0;
  fx.data.ifm_checksum = [&] { return std::to_string(calls++); };
  EXPECT_THROW(pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp), NumericError);
  fx.data.ifm_checksum = [] { return std::string("abc"); };
  const auto r = pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp);
  EXPECT_EQ(r.log.ifm_checksum_before, "abc");
  EXPECT_EQ(r.log.ifm_checksum_after, "abc");
}

TEST(Finetune, ArmsShareDataOrder) {
  Fixture fx;
  auto pre = pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp);
  const auto tmm = extract_tmm(*pre.model);
  const auto a = finetune(Fixture::ft(), fx.data, Fixture::model_cfg(), tasks::Task::Motion, tmm, fx.eval);
  const auto b = finetune(Fixture::ft(), fx.data, Fixture::model_cfg(), tasks::Task::Motion, std::nullopt, fx.eval);
  EXPECT_EQ(a.log.data_digest, b.log.data_digest);
  EXPECT_EQ(a.log.steps, b.log.steps);
  EXPECT_FALSE(same_bits(a.log.step_losses, b.log.step_losses));
  EXPECT_GE(a.accuracy, 0.0);
  EXPECT_LE(a.accuracy, 1.0);
  const auto report = tasks::MetricsReport::paired(a.accuracy, b.accuracy);
  EXPECT_EQ(report.delta_acc, a.accuracy - b.accuracy);
}

TEST(Finetune, PretrainedTmmIsInherited) {
  Fixture fx;
  auto pre = pretrain(Fixture::pre(1), fx.data, Fixture::model_cfg(), fx.prp);
  const auto tmm = extract_tmm(*pre.model);
  auto ft = Fixture::ft(0);
  const auto a = finetune(ft, fx.data, Fixture::model_cfg(), tasks::Task::Motion, tmm, fx.eval);
  const auto sa = model::state_dict(*a.model);
  for (const auto& [k, v] : tmm.state) EXPECT_EQ(sa.at(k), v) << k;
  // head is fresh, shared with the scratch arm
  const auto b = finetune(ft, fx.data, Fixture::model_cfg(), tasks::Task::Motion, std::nullopt, fx.eval);
  const auto sb = model::state_dict(*b.model);
  EXPECT_EQ(sa.at("head.fc1.weight"), sb.at("head.fc1.weight"));
  EXPECT_NE(sa.at("tmm.block0.conv1.weight"), sb.at("tmm.block0.conv1.weight"));
}

TEST(Finetune, FrozenTmmOnlyMovesHead) {
  Fixture fx;
  auto r = Fixture::ft(1);
  r.freeze_tmm = true;
  const auto res = finetune(r, fx.data, Fixture::model_cfg(), tasks::Task::Appearance, std::nullopt, fx.eval);
  model::Model<float> init(Fixture::model_cfg(), derive_seed(5, "init"));
  auto* trained = res.model.get();
  const auto after_params = trained->parameters();
  const auto before_params = init.parameters();
  for (std::size_t i = 0; i < after_params.size(); ++i) {
    const bool is_head = after_params[i]->name().rfind("head.", 0) == 0;
    if (is_head) {
      EXPECT_NE(after_params[i]->value(), before_params[i]->value()) << after_params[i]->name();
    } else {
      EXPECT_EQ(after_params[i]->value(), before_params[i]->value()) << after_params[i]->name();
    }
  }
}

TEST(Finetune, MismatchedTmmNamesDims) {
  Fixture fx;
  auto pre = pretrain(Fixture::pre(0), fx.data, Fixture::model_cfg(), fx.prp);
  const auto tmm = extract_tmm(*pre.model);
  auto cfg = Fixture::model_cfg();
  cfg.tmm.hidden = 7;
  try {
    finetune(Fixture::ft(1), fx.data, cfg, tasks::Task::Motion, tmm, fx.eval);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("hidden=6"), std::string::npos) << msg;
    EXPECT_NE(msg.find("hidden=7"), std::string::npos) << msg;
  }
}

TEST(Finetune, HeadTooSmallForLabels) {
  Fixture fx;
  auto cfg = Fixture::model_cfg();
  cfg.head.n_classes = 2;
  EXPECT_THROW(finetune(Fixture::ft(1), fx.data, cfg, tasks::Task::Appearance, std::nullopt, fx.eval), ConfigError);
}

}  // namespace
