#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tempo/core/error.hpp"
#include "tempo/trainer/experiment.hpp"

namespace fs = std::filesystem;
using namespace tempo;
using namespace tempo::trainer;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("tempo_experiment_" + name);
  fs::remove_all(d);
  return d;
}

RunConfig tiny(const fs::path& root) {
  RunConfig c;
  c.corpus.n_videos = 20;
  c.corpus.frames = 24;
  c.corpus.height = c.corpus.width = 16;
  c.corpus.seed = 3;
  c.stub.feature_dim = 8;
  c.stub.depth = 1;
  c.tmm_hidden = 6;
  c.head_hidden = 10;
  c.prp.clip_length = 3;
  c.pretrain.epochs = 1;
  c.pretrain.batch_size = 8;
  c.pretrain.clip_length = 3;
  c.finetune.epochs = 1;
  c.finetune.batch_size = 4;
  c.finetune.clip_length = 3;
  c.eval = {2, 2, 3, 0.75};
  c.out_dir = (root / "runs").string();
  c.cache_dir = (root / "cache").string();
  return RunConfig::from_json(c.to_json());
}

TEST(RunConfigJson, RoundTrip) {
  const auto c = tiny("/tmp/x");
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_EQ(RunConfig::from_json(json::object()).to_json(), RunConfig{}.to_json());
}

TEST(RunConfigJson, StrictKeysAndTypes) {
  EXPECT_THROW(RunConfig::from_json({{"seeds", 3}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"model", {{"tmm", {{"depth", 2}}}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", 3}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"task", "colour"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"model", {{"aggregator", "max"}}}}), ConfigError);
  EXPECT_NO_THROW(RunConfig::from_json({{"model", {{"sfu", {{"spatial", 2}}}}}}));
}

TEST(RunConfigJson, DottedOverrides) {
  json j = RunConfig{}.to_json();
  set_dotted(j, "model.sfu.spatial", "4");
  set_dotted(j, "aggregator", "average_pooling");
  set_dotted(j, "task", "appearance");
  set_dotted(j, "pretrain.epochs", "20");
  const auto c = RunConfig::from_json(j);
  EXPECT_EQ(c.sfu.spatial, 4);
  EXPECT_EQ(c.aggregator, model::Aggregator::AveragePooling);
  EXPECT_EQ(c.task, tasks::Task::Appearance);
  EXPECT_EQ(c.pretrain.epochs, 20);
  set_dotted(j, "model.sfu.spatial", "null");
  EXPECT_FALSE(RunConfig::from_json(j).sfu.spatial);
  EXPECT_THROW(set_dotted(j, "model.sfu.size", "4"), ConfigError);
  EXPECT_THROW(set_dotted(j, "pretrain.epochs", "many"), ConfigError);
  EXPECT_THROW(load_run_config("", {"seed"}), ConfigError);
  EXPECT_EQ(load_run_config("", {"seed=7"}).seed, 7u);
}

TEST(RunConfigJson, ConfigFileAndUnknownKey) {
  const auto d = fresh_dir("file");
  fs::create_directories(d);
  std::ofstream(d / "good.json") << R"({"seed": 4, "model": {"tmm": {"n_blocks": 2}}})";
  std::ofstream(d / "bad.json") << R"({"model": {"tmm": {"blocks": 2}}})";
  const auto c = load_run_config(d / "good.json", {"seed=5"});
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.tmm_blocks, 2);
  try {
    load_run_config(d / "bad.json", {});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.tmm.blocks"), std::string::npos);
  }
}

TEST(Hashes, StableAndSelective) {
  const auto a = tiny("/tmp/a");
  auto b = tiny("/tmp/b");
  b.seed = 9;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  auto c = a;
  c.task = tasks::Task::Appearance;
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(pretrain_hash(a), pretrain_hash(c));
  c.finetune.epochs = 5;
  EXPECT_EQ(pretrain_hash(a), pretrain_hash(c));
  c.pretrain.epochs = 5;
  EXPECT_NE(pretrain_hash(a), pretrain_hash(c));
  auto p = a;
  p.aggregator = model::Aggregator::AveragePooling;
  EXPECT_NE(pretrain_hash(a), pretrain_hash(p));
}

TEST(Axes, Parse) {
  const auto a = parse_axis_spec("model.sfu.spatial=1,2,null");
  EXPECT_EQ(a.key, "model.sfu.spatial");
  ASSERT_EQ(a.values.size(), 3u);
  EXPECT_EQ(a.values[0], json(1));
  EXPECT_TRUE(a.values[2].is_null());
  EXPECT_EQ(parse_axis_spec("aggregator=tmm,average_pooling").values[1], json("average_pooling"));
  EXPECT_THROW(parse_axis_spec("aggregator"), ConfigError);
  EXPECT_THROW(parse_axis_spec("=1"), ConfigError);
}

TEST(RunData, MissingCorpusNamesGenData) {
  auto c = tiny(fresh_dir("missing"));
  c.corpus_dir = "/nonexistent/corpus";
  try {
    RunData d(c);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos);
  }
}

TEST(RunData, GeometryFromStub) {
  const auto c = tiny(fresh_dir("geom"));
  RunData d(c);
  const auto m = d.model_config(c);
  EXPECT_EQ(m.in_channels, 8);
  EXPECT_EQ(m.grid_h, 2);
  EXPECT_EQ(m.head.n_classes, 4);
  EXPECT_EQ(d.context().frames, 24);
  EXPECT_EQ(d.context().videos.size(), 20u);
  EXPECT_FALSE(d.context().ifm_checksum().empty());
}

TEST(RunPoint, PairedRunWritesAndReusesArtifacts) {
  const auto root = fresh_dir("point");
  const auto c = tiny(root);
  const auto r = run_point(c, "unit");
  ASSERT_FALSE(r.failed);
  EXPECT_FALSE(r.cached);
  for (const char* f : {"run_config.json", "pretrain_recipe.json", "finetune_recipe.json", "metrics.json",
                        "loss_ft.jsonl", "loss_scratch.jsonl"}) {
    EXPECT_TRUE(fs::exists(r.dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(r.dir / "checkpoints" / "ft" / "latest"));
  EXPECT_TRUE(fs::exists(r.dir / "checkpoints" / "scratch" / "latest"));
  EXPECT_DOUBLE_EQ(r.metrics.delta_acc, r.metrics.acc_ft - r.metrics.acc_scratch);
  EXPECT_GE(r.prp_val_accuracy, 0.0);
  EXPECT_EQ(r.extra["ft"]["data_digest"], r.extra["scratch"]["data_digest"]);
  EXPECT_EQ(r.extra["pretrain"]["ifm_checksum_before"], r.extra["pretrain"]["ifm_checksum_after"]);

  const auto again = run_point(c, "unit");
  EXPECT_TRUE(again.cached);
  EXPECT_EQ(again.metrics.acc_ft, r.metrics.acc_ft);

  // a new task reuses the pretraining and gets its own run directory
  auto app = c;
  app.task = tasks::Task::Appearance;
  const auto r2 = run_point(app, "unit");
  EXPECT_NE(r2.dir, r.dir);
  EXPECT_EQ(r2.prp_val_accuracy, r.prp_val_accuracy);
  EXPECT_EQ(std::distance(fs::directory_iterator(fs::path(c.out_dir) / "pretrain"), fs::directory_iterator{}), 1);
}

TEST(RunPoint, PoolingArmHasNoPretraining) {
  auto c = tiny(fresh_dir("pool"));
  c.aggregator = model::Aggregator::AveragePooling;
  const auto r = run_point(c, "unit");
  EXPECT_EQ(r.metrics.acc_ft, r.metrics.acc_scratch);
  EXPECT_EQ(r.metrics.delta_acc, 0.0);
  EXPECT_FALSE(r.extra["pretrained"].get<bool>());
  EXPECT_FALSE(fs::exists(fs::path(c.out_dir) / "pretrain"));
}

TEST(Sweep, ProductSeedsFailuresAndReport) {
  const auto root = fresh_dir("sweep");
  const auto c = tiny(root);
  // spatial 3 exceeds the 2x2 grid and fails
  const auto results = run_experiment(c, "sw", {parse_axis_spec("model.sfu.spatial=1,3")}, {0, 1}, 2);
  ASSERT_EQ(results.size(), 4u);
  int failed = 0;
  for (const auto& r : results) failed += r.failed ? 1 : 0;
  EXPECT_EQ(failed, 2);
  for (const auto& r : results) {
    if (r.failed) EXPECT_FALSE(r.error.empty());
  }
  const auto csv = report_csv(fs::path(c.out_dir) / "sw");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "sweep,config_hash,task,model.sfu.spatial,acc_ft,acc_scratch,delta_acc,prp_val_accuracy,seed,status");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find(",failed\n"), std::string::npos);
  EXPECT_EQ(report_csv(root / "nothing"), report_csv(root / "nothing2"));
}

}  // namespace
