#pragma once

// Run configuration, run directories and sweeps.
//
// runs/<sweep>/<config-hash>/<seed>/
//   run_config.json  pretrain_recipe.json  finetune_recipe.json
//   metrics.json     loss_ft.jsonl  loss_scratch.jsonl  checkpoints/{ft,scratch}
// <out>/pretrain/<pretrain-hash>/<seed>/ holds pretraining checkpoints shared by
// every run whose pretraining inputs agree.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data/synth.hpp"
#include "tempo/ifm/stub_encoder.hpp"
#include "tempo/model/model.hpp"
#include "tempo/tasks/tasks.hpp"
#include "tempo/trainer/trainer.hpp"

namespace tempo::trainer {

struct RunConfig {
  data::CorpusSpec corpus;
  std::string corpus_dir;  // empty: render videos on demand from `corpus`
  ifm::StubEncoderConfig stub;
  std::string features_dir;  // non-empty: imported AVFS features replace the stub
  model::SFUConfig sfu;
  std::int64_t tmm_blocks = 1;
  std::int64_t tmm_hidden = 256;
  std::int64_t head_hidden = 1024;
  model::Aggregator aggregator = model::Aggregator::Tmm;
  tasks::PRPConfig prp;
  TrainRecipe pretrain = TrainRecipe::pretrain_default();
  TrainRecipe finetune = TrainRecipe::finetune_default();
  tasks::EvalConfig eval;
  tasks::Task task = tasks::Task::Motion;
  std::uint64_t seed = 0;
  std::string out_dir = "runs";
  std::string cache_dir = "cache";

  // Strict: unknown keys and type mismatches raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Model config for the downstream task, geometry taken from the feature source.
  model::ModelConfig model_config(std::int64_t in_channels, std::int64_t grid_h, std::int64_t grid_w) const;
  void validate() const;
};

// Merges `overlay` into `base`; every overlay key must already exist in base.
void merge_strict(nlohmann::json& base, const nlohmann::json& overlay, const std::string& path = "");

// Sets a dotted leaf (e.g. "model.sfu.spatial") from text; the text is parsed
// as JSON when possible, otherwise kept as a string.
void set_dotted(nlohmann::json& j, const std::string& dotted, const std::string& text);

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

// Hash of the run-defining settings (excludes seed and directories).
std::string config_hash(const RunConfig& cfg);
// Hash of the settings pretraining depends on.
std::string pretrain_hash(const RunConfig& cfg);

// Resolved data sources for a run configuration.
class RunData {
 public:
  explicit RunData(const RunConfig& cfg);
  ~RunData();
  RunData(const RunData&) = delete;
  RunData& operator=(const RunData&) = delete;

  const DataContext& context() const { return ctx_; }
  model::ModelConfig model_config(const RunConfig& cfg) const;
  ifm::FeatureProvider& provider() { return *provider_; }
  std::int64_t n_classes(tasks::Task task) const;

 private:
  data::CorpusSpec spec_;
  std::vector<data::VideoMeta> videos_;
  std::unique_ptr<ifm::FeatureProvider> provider_;
  DataContext ctx_;
  std::int64_t channels_ = 0, grid_h_ = 0, grid_w_ = 0;
};

struct RunResult {
  std::filesystem::path dir;
  tasks::MetricsReport metrics;
  double prp_val_accuracy = -1;
  bool cached = false;
  bool failed = false;
  std::string error;
  nlohmann::json extra = nlohmann::json::object();  // axes, digests, checksums
};

// Pretraining for cfg, cached under <out>/pretrain.
struct PretrainArtifact {
  PretrainedTmm tmm;
  TrainLog log;
  double val_prp_accuracy = -1;
};
std::optional<PretrainArtifact> pretrain_cached(const RunConfig& cfg, RunData& data);

// One paired run: pretrain, fine-tune from it, fine-tune from scratch. The
// pooling aggregator has nothing to inherit and runs the scratch arm only.
// Reuses metrics.json when the stored config matches.
RunResult run_point(const RunConfig& cfg, const std::string& sweep, const nlohmann::json& axes = nlohmann::json::object());

struct SweepAxis {
  std::string key;                   // dotted RunConfig path
  std::vector<nlohmann::json> values;
};
SweepAxis parse_axis_spec(const std::string& spec);  // "model.aggregator=tmm,average_pooling"

// Cartesian product of the axes, for every seed. Failures are recorded, not thrown.
std::vector<RunResult> run_experiment(const RunConfig& base, const std::string& sweep,
                                      const std::vector<SweepAxis>& axes, const std::vector<std::uint64_t>& seeds,
                                      int parallel = 1);

// Flattens every metrics.json under `root` into CSV rows.
std::string report_csv(const std::filesystem::path& root);

}  // namespace tempo::trainer
