#pragma once

// Playback-rate pretext task, downstream label factors, multi-view evaluation
// and accuracy metrics. Everything operates on frozen feature sequences.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/core/rng.hpp"
#include "tempo/data/synth.hpp"
#include "tempo/ifm/feature_cache.hpp"
#include "tempo/model/model.hpp"

namespace tempo::tasks {

struct PRPConfig {
  std::vector<std::int64_t> rate_set{1, 2, 4, 8};
  std::int64_t clip_length = 8;
  std::int64_t clips_per_video = 4;

  std::int64_t n_classes() const { return static_cast<std::int64_t>(rate_set.size()); }
  std::int64_t max_rate() const { return rate_set.back(); }
  // Index of `rate` in the rate set; InputError if absent.
  std::int64_t label_of(std::int64_t rate) const;
  void validate() const;
};

struct EvalConfig {
  std::int64_t temporal_views = 10;
  std::int64_t spatial_views = 3;
  std::int64_t clip_length = 8;
  double crop_fraction = 0.75;  // crop width relative to the feature grid width

  std::int64_t total_views() const { return temporal_views * spatial_views; }
  void validate() const;
};

enum class Task { Appearance, Motion };
std::string task_name(Task t);
Task parse_task(const std::string& name);
std::int64_t label_for(const data::VideoMeta& v, Task t);

// Width of the horizontal feature-grid crop used for training and evaluation.
std::int64_t crop_width(std::int64_t grid_w, double crop_fraction);

// One training or evaluation sample: strided frames of a video, cropped
// horizontally on the feature grid.
struct ClipPlan {
  std::int64_t video = 0;  // index into the video list
  std::int64_t start = 0;
  std::int64_t rate = 1;
  std::int64_t length = 8;
  std::int64_t crop_x = 0;
  std::int64_t crop_w = 0;  // 0 = full width
  std::int64_t label = 0;

  bool operator==(const ClipPlan&) const = default;
};

// (N, C, L, Hf, crop_w) features for the plans, before SFU.
Tensor<float> assemble_features(ifm::FeatureProvider& provider,
                                const std::vector<data::VideoMeta>& videos,
                                std::span<const ClipPlan> plans);

// Spatial then channel compression, as configured.
Tensor<float> apply_sfu(const Tensor<float>& features, const model::SFUConfig& sfu);

struct Batch {
  Tensor<float> features;  // (N, C', L, H', W') after SFU
  std::vector<std::int64_t> labels;
  std::vector<ClipPlan> plans;
};

Batch make_batch(ifm::FeatureProvider& provider, const std::vector<data::VideoMeta>& videos,
                 std::span<const ClipPlan> plans, const model::SFUConfig& sfu);

// clips_per_video PRP clips for each listed video: rate uniform over the rate
// set, start uniform over the valid range, crop uniform over valid offsets.
std::vector<ClipPlan> sample_prp_plans(const PRPConfig& cfg,
                                       const std::vector<data::VideoMeta>& videos,
                                       std::span<const std::int64_t> video_indices,
                                       std::int64_t frames, std::int64_t grid_w, double crop_fraction,
                                       Rng& rng);

Batch make_prp_batch(ifm::FeatureProvider& provider, const std::vector<data::VideoMeta>& videos,
                     std::span<const std::int64_t> video_indices, const PRPConfig& cfg,
                     const model::SFUConfig& sfu, std::int64_t frames, std::int64_t grid_w,
                     double crop_fraction, Rng& rng);

// Mean softmax cross-entropy; InputError when K != |rate_set| or a label >= K.
template <typename T>
nn::Var<T> prp_loss(const nn::Var<T>& logits, std::span<const std::int64_t> labels,
                    const PRPConfig& cfg);

// Evaluation views for one video: temporal starts round(i*(T-L)/(n-1)) at
// rate 1, times distinct left/centre/right crops. Deterministic.
std::vector<ClipPlan> eval_plans(std::int64_t video, std::int64_t frames, std::int64_t grid_w,
                                 const EvalConfig& cfg);

struct Prediction {
  std::int64_t label = 0;
  std::vector<double> probs;  // mean of per-view softmax
  std::int64_t views = 0;
};

// argmax of the mean per-view softmax. Runs the model in eval mode.
Prediction multiview_predict(model::Model<float>& model, ifm::FeatureProvider& provider,
                             const std::vector<data::VideoMeta>& videos, std::int64_t video,
                             std::int64_t frames, const EvalConfig& cfg);

// Mean of per-view probabilities from explicit logits; exposed for tests.
Prediction average_views(const Tensor<float>& logits);

// Top-1 accuracy over `indices`; InputError if empty.
double evaluate_accuracy(model::Model<float>& model, ifm::FeatureProvider& provider,
                         const std::vector<data::VideoMeta>& videos,
                         std::span<const std::int64_t> indices, Task task, std::int64_t frames,
                         const EvalConfig& cfg);

// PRP accuracy on fixed, seed-determined clips of the listed videos.
double evaluate_prp(model::Model<float>& model, ifm::FeatureProvider& provider,
                    const std::vector<data::VideoMeta>& videos,
                    std::span<const std::int64_t> indices, const PRPConfig& cfg,
                    std::int64_t frames, double crop_fraction, std::uint64_t seed);

inline double delta_acc(double acc_ft, double acc_scratch) { return acc_ft - acc_scratch; }

struct MetricsReport {
  double acc_ft = 0;
  double acc_scratch = 0;
  double delta_acc = 0;
  std::vector<double> per_epoch_losses;
  std::vector<std::uint64_t> seeds;

  static MetricsReport paired(double acc_ft, double acc_scratch);
  nlohmann::json to_json() const;
};

// Appends one JSON object per line.
void append_jsonl(const std::string& path, const nlohmann::json& record);

std::vector<std::int64_t> split_indices(const std::vector<data::VideoMeta>& videos, data::Split split);

}  // namespace tempo::tasks
