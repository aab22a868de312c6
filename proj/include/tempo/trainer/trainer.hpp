#pragma once

// PRP pretraining and downstream fine-tuning loops on frozen features.
// Data order and augmentation come from named RNG streams that depend only on
// (seed, epoch, step), so the two fine-tuning arms see identical batches and a
// resumed run replays the uninterrupted one exactly.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data/synth.hpp"
#include "tempo/ifm/feature_cache.hpp"
#include "tempo/model/model.hpp"
#include "tempo/nn/optim.hpp"
#include "tempo/tasks/tasks.hpp"

namespace tempo::trainer {

enum class Phase { Pretrain, Finetune };
std::string phase_name(Phase p);

struct TrainRecipe {
  Phase phase = Phase::Pretrain;
  std::int64_t epochs = 60;
  std::int64_t batch_size = 32;  // clips per step
  double eta = 1e-2;
  double weight_decay = 1e-6;
  std::int64_t clip_length = 8;
  std::int64_t clips_per_video = 4;
  std::uint64_t seed = 0;
  double crop_fraction = 0.75;
  bool freeze_tmm = false;  // diagnostic: train the head only

  double max_lr() const { return eta * static_cast<double>(batch_size) / 64.0; }
  std::int64_t videos_per_step() const;
  std::int64_t steps_per_epoch(std::int64_t n_train_videos) const;
  std::int64_t total_steps(std::int64_t n_train_videos) const;
  void validate() const;

  static TrainRecipe pretrain_default();
  static TrainRecipe finetune_default();
};

nlohmann::json to_json(const TrainRecipe& r);
TrainRecipe recipe_from_json(const nlohmann::json& j);

// Everything a loop needs to read frozen features.
struct DataContext {
  std::vector<data::VideoMeta> videos;
  ifm::FeatureProvider* provider = nullptr;
  std::int64_t frames = 0;  // frames per video
  std::int64_t grid_w = 0;  // feature grid width before cropping
  // Digest of the frozen encoder weights; empty when not applicable.
  std::function<std::string()> ifm_checksum;

  std::vector<std::int64_t> train_indices() const;
  std::vector<std::int64_t> val_indices() const;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::int64_t checkpoint_every = 0;     // steps; 0 = once per epoch
  std::int64_t stop_after = -1;          // stop (after checkpointing) once this many steps are done
  bool resume = true;                    // continue from checkpoint_dir when present
  std::filesystem::path loss_log;        // JSONL, one record per step; empty: none
};

struct TrainLog {
  std::vector<double> step_losses;   // steps run in this invocation and any resumed prefix
  std::vector<double> epoch_losses;  // mean step loss per completed epoch
  std::string data_digest;           // hash of every clip plan, in order
  std::string ifm_checksum_before;
  std::string ifm_checksum_after;
  std::int64_t steps = 0;
  std::int64_t total_steps = 0;
  bool resumed = false;

  nlohmann::json to_json() const;
};

struct PretrainResult {
  std::unique_ptr<model::Model<float>> model;
  TrainLog log;
  double val_prp_accuracy = -1;  // set when evaluated
};

// Model config used for pretraining: the PRP head has |rate_set| classes.
model::ModelConfig prp_model_config(model::ModelConfig cfg, const tasks::PRPConfig& prp);

// ConfigError for the pooling aggregator; NumericError on a non-finite loss.
PretrainResult pretrain(const TrainRecipe& recipe, const DataContext& data,
                        const model::ModelConfig& model_cfg, const tasks::PRPConfig& prp,
                        const TrainOptions& opts = {});

// A pretrained temporal module to inherit.
struct PretrainedTmm {
  model::ModelConfig config;
  model::TensorBundle state;
};

PretrainedTmm extract_tmm(model::Model<float>& model);

struct FinetuneResult {
  std::unique_ptr<model::Model<float>> model;
  TrainLog log;
  double accuracy = 0;  // multi-view top-1 on the validation split
};

// init == nullopt trains from scratch. The head is always freshly initialised.
// A pretrained TMM whose shape differs from model_cfg raises ConfigError
// naming the mismatched dimensions.
FinetuneResult finetune(const TrainRecipe& recipe, const DataContext& data,
                        const model::ModelConfig& model_cfg, tasks::Task task,
                        const std::optional<PretrainedTmm>& init, const tasks::EvalConfig& eval,
                        const TrainOptions& opts = {});

// Per-step clip plans, exposed for tests. Pure function of its arguments.
std::vector<tasks::ClipPlan> step_plans(const TrainRecipe& recipe, const DataContext& data,
                                        const tasks::PRPConfig& prp, tasks::Task task,
                                        std::int64_t step);

}  // namespace tempo::trainer
