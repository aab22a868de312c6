#include "tempo/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tempo/core/error.hpp"

namespace tempo::tasks {

std::int64_t PRPConfig::label_of(std::int64_t rate) const {
  auto it = std::find(rate_set.begin(), rate_set.end(), rate);
  if (it == rate_set.end()) throw InputError("rate " + std::to_string(rate) + " not in rate set");
  return it - rate_set.begin();
}

void PRPConfig::validate() const {
  if (rate_set.size() < 2) throw ConfigError("PRP needs at least two rates");
  for (std::size_t i = 0; i < rate_set.size(); ++i) {
    if (rate_set[i] < 1) throw ConfigError("PRP rates must be >= 1");
    if (i > 0 && rate_set[i] <= rate_set[i - 1]) throw ConfigError("PRP rates must be strictly increasing");
  }
  if (clip_length < 1) throw ConfigError("PRP clip length must be positive");
  if (clips_per_video < 1) throw ConfigError("PRP clips per video must be positive");
}

void EvalConfig::validate() const {
  if (temporal_views < 1 || spatial_views < 1) throw ConfigError("evaluation needs at least one view");
  if (clip_length < 1) throw ConfigError("evaluation clip length must be positive");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw ConfigError("crop fraction must be in (0, 1]");
}

std::string task_name(Task t) { return t == Task::Appearance ? "appearance" : "motion"; }

Task parse_task(const std::string& name) {
  if (name == "appearance") return Task::Appearance;
  if (name == "motion") return Task::Motion;
  throw ConfigError("unknown task '" + name + "' (expected appearance or motion)");
}

std::int64_t label_for(const data::VideoMeta& v, Task t) {
  return t == Task::Appearance ? v.appearance_label : v.motion_label;
}

std::int64_t crop_width(std::int64_t grid_w, double crop_fraction) {
  const auto w = static_cast<std::int64_t>(std::ceil(crop_fraction * static_cast<double>(grid_w) - 1e-9));
  return std::clamp<std::int64_t>(w, 1, grid_w);
}

Tensor<float> assemble_features(ifm::FeatureProvider& provider,
                                const std::vector<data::VideoMeta>& videos,
                                std::span<const ClipPlan> plans) {
  if (plans.empty()) throw InputError("empty batch");
  Shape out_shape;
  float* dst = nullptr;
  Tensor<float> out;
  for (std::size_t n = 0; n < plans.size(); ++n) {
    const ClipPlan& p = plans[n];
    const auto& meta = videos.at(static_cast<std::size_t>(p.video));
    std::vector<std::int64_t> frames(static_cast<std::size_t>(p.length));
    for (std::int64_t i = 0; i < p.length; ++i) frames[static_cast<std::size_t>(i)] = p.start + i * p.rate;
    const auto fs = provider.get(meta.id, frames);
    const std::int64_t C = fs.channels(), H = fs.grid_h(), W = fs.grid_w();
    const std::int64_t cw = p.crop_w == 0 ? W : p.crop_w;
    if (p.crop_x < 0 || p.crop_x + cw > W) throw InputError("crop outside the feature grid");
    if (n == 0) {
      out = Tensor<float>(Shape{static_cast<std::int64_t>(plans.size()), C, p.length, H, cw});
      out_shape = out.shape();
      dst = out.raw();
    } else if (out_shape[1] != C || out_shape[2] != p.length || out_shape[3] != H || out_shape[4] != cw) {
      throw InputError("clips in one batch must share a shape");
    }
    float* base = dst + static_cast<std::int64_t>(n) * C * p.length * H * cw;
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t l = 0; l < p.length; ++l)
        for (std::int64_t h = 0; h < H; ++h) {
          const float* src = fs.features.raw() + ((l * C + c) * H + h) * W + p.crop_x;
          std::copy_n(src, cw, base + ((c * p.length + l) * H + h) * cw);
        }
  }
  return out;
}

Tensor<float> apply_sfu(const Tensor<float>& features, const model::SFUConfig& sfu) {
  nn::Var<float> x(features);
  if (sfu.spatial) x = model::sfu_spatial_compress(x, *sfu.spatial);
  if (sfu.channels) x = model::sfu_channel_compress(x, 1, *sfu.channels);
  return x.value();
}

Batch make_batch(ifm::FeatureProvider& provider, const std::vector<data::VideoMeta>& videos,
                 std::span<const ClipPlan> plans, const model::SFUConfig& sfu) {
  Batch b;
  b.features = apply_sfu(assemble_features(provider, videos, plans), sfu);
  b.plans.assign(plans.begin(), plans.end());
  for (const auto& p : plans) b.labels.push_back(p.label);
  return b;
}

std::vector<ClipPlan> sample_prp_plans(const PRPConfig& cfg,
                                       const std::vector<data::VideoMeta>& videos,
                                       std::span<const std::int64_t> video_indices,
                                       std::int64_t frames, std::int64_t grid_w, double crop_fraction,
                                       Rng& rng) {
  cfg.validate();
  const std::int64_t cw = crop_width(grid_w, crop_fraction);
  std::vector<ClipPlan> plans;
  for (auto v : video_indices) {
    if (v < 0 || v >= static_cast<std::int64_t>(videos.size())) throw InputError("video index out of range");
    for (std::int64_t k = 0; k < cfg.clips_per_video; ++k) {
      ClipPlan p;
      p.video = v;
      p.label = rng.uniform_int(0, cfg.n_classes() - 1);
      p.rate = cfg.rate_set[static_cast<std::size_t>(p.label)];
      p.length = cfg.clip_length;
      p.start = rng.uniform_int(0, data::start_range(frames, p.length, p.rate) - 1);
      p.crop_w = cw;
      p.crop_x = rng.uniform_int(0, grid_w - cw);
      plans.push_back(p);
    }
  }
  return plans;
}

Batch make_prp_batch(ifm::FeatureProvider& provider, const std::vector<data::VideoMeta>& videos,
                     std::span<const std::int64_t> video_indices, const PRPConfig& cfg,
                     const model::SFUConfig& sfu, std::int64_t frames, std::int64_t grid_w,
                     double crop_fraction, Rng& rng) {
  const auto plans = sample_prp_plans(cfg, videos, video_indices, frames, grid_w, crop_fraction, rng);
  return make_batch(provider, videos, plans, sfu);
}

template <typename T>
nn::Var<T> prp_loss(const nn::Var<T>& logits, std::span<const std::int64_t> labels,
                    const PRPConfig& cfg) {
  if (logits.shape().size() != 2 || logits.shape()[1] != cfg.n_classes()) {
    throw InputError("PRP logits must be (N," + std::to_string(cfg.n_classes()) + "), got " +
                     shape_str(logits.shape()));
  }
  return nn::softmax_cross_entropy(logits, labels);
}

template nn::Var<float> prp_loss<float>(const nn::Var<float>&, std::span<const std::int64_t>, const PRPConfig&);
template nn::Var<double> prp_loss<double>(const nn::Var<double>&, std::span<const std::int64_t>, const PRPConfig&);

std::vector<ClipPlan> eval_plans(std::int64_t video, std::int64_t frames, std::int64_t grid_w,
                                 const EvalConfig& cfg) {
  cfg.validate();
  std::vector<std::int64_t> starts;
  std::int64_t length = cfg.clip_length;
  if (frames < length) {
    length = frames;
    starts = {0};
  } else {
    const std::int64_t span = frames - length;
    for (std::int64_t i = 0; i < cfg.temporal_views; ++i) {
      const std::int64_t s = cfg.temporal_views == 1
                                 ? span / 2
                                 : std::llround(static_cast<double>(i * span) /
                                                static_cast<double>(cfg.temporal_views - 1));
      starts.push_back(s);
    }
  }
  const std::int64_t cw = crop_width(grid_w, cfg.crop_fraction);
  std::vector<std::int64_t> xs;
  const std::int64_t slack = grid_w - cw;
  for (std::int64_t j = 0; j < cfg.spatial_views; ++j) {
    const std::int64_t x = cfg.spatial_views == 1
                               ? slack / 2
                               : std::llround(static_cast<double>(j * slack) /
                                              static_cast<double>(cfg.spatial_views - 1));
    if (std::find(xs.begin(), xs.end(), x) == xs.end()) xs.push_back(x);
  }
  std::vector<ClipPlan> plans;
  for (auto s : starts)
    for (auto x : xs) plans.push_back(ClipPlan{video, s, 1, length, x, cw, 0});
  return plans;
}

Prediction average_views(const Tensor<float>& logits) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  Prediction p;
  p.views = n;
  p.probs.assign(static_cast<std::size_t>(k), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < k; ++j) p.probs[static_cast<std::size_t>(j)] += std::exp(row[j] - mx) / z;
  }
  for (auto& v : p.probs) v /= static_cast<double>(n);
  p.label = std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin();
  return p;
}

Prediction multiview_predict(model::Model<float>& model, ifm::FeatureProvider& provider,
                             const std::vector<data::VideoMeta>& videos, std::int64_t video,
                             std::int64_t frames, const EvalConfig& cfg) {
  const auto plans = eval_plans(video, frames, model.config().grid_w, cfg);
  const auto batch = make_batch(provider, videos, plans, model.config().sfu);
  const auto logits = model.forward_compressed(nn::Var<float>(batch.features), false);
  return average_views(logits.value());
}

double evaluate_accuracy(model::Model<float>& model, ifm::FeatureProvider& provider,
                         const std::vector<data::VideoMeta>& videos,
                         std::span<const std::int64_t> indices, Task task, std::int64_t frames,
                         const EvalConfig& cfg) {
  if (indices.empty()) throw InputError("cannot evaluate an empty split");
  std::int64_t correct = 0;
  for (auto v : indices) {
    const auto pred = multiview_predict(model, provider, videos, v, frames, cfg);
    correct += pred.label == label_for(videos.at(static_cast<std::size_t>(v)), task);
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

double evaluate_prp(model::Model<float>& model, ifm::FeatureProvider& provider,
                    const std::vector<data::VideoMeta>& videos,
                    std::span<const std::int64_t> indices, const PRPConfig& cfg,
                    std::int64_t frames, double crop_fraction, std::uint64_t seed) {
  if (indices.empty()) throw InputError("cannot evaluate an empty split");
  const std::int64_t cw = crop_width(model.config().grid_w, crop_fraction);
  std::vector<ClipPlan> plans;
  for (auto v : indices) {
    Rng rng(seed, "prp-eval", static_cast<std::uint64_t>(v));
    for (std::int64_t r = 0; r < cfg.n_classes(); ++r) {
      ClipPlan p;
      p.video = v;
      p.label = r;
      p.rate = cfg.rate_set[static_cast<std::size_t>(r)];
      p.length = cfg.clip_length;
      p.start = rng.uniform_int(0, data::start_range(frames, p.length, p.rate) - 1);
      p.crop_w = cw;
      p.crop_x = (model.config().grid_w - cw) / 2;
      plans.push_back(p);
    }
  }
  std::int64_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < plans.size(); i += kChunk) {
    const std::span<const ClipPlan> chunk(plans.data() + i, std::min(kChunk, plans.size() - i));
    const auto batch = make_batch(provider, videos, chunk, model.config().sfu);
    const auto logits = model.forward_compressed(nn::Var<float>(batch.features), false).value();
    const std::int64_t k = logits.dim(1);
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      const float* row = logits.raw() + static_cast<std::int64_t>(n) * k;
      correct += (std::max_element(row, row + k) - row) == chunk[n].label;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(plans.size());
}

MetricsReport MetricsReport::paired(double acc_ft, double acc_scratch) {
  MetricsReport r;
  r.acc_ft = acc_ft;
  r.acc_scratch = acc_scratch;
  r.delta_acc = tasks::delta_acc(acc_ft, acc_scratch);
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"acc_ft", acc_ft},
          {"acc_scratch", acc_scratch},
          {"delta_acc", delta_acc},
          {"per_epoch_losses", per_epoch_losses},
          {"seeds", seeds}};
}

void append_jsonl(const std::string& path, const nlohmann::json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path);
  out << record.dump() << "\n";
}

std::vector<std::int64_t> split_indices(const std::vector<data::VideoMeta>& videos, data::Split split) {
  std::vector<std::int64_t> out;
  for (const auto& v : videos)
    if (v.split == split) out.push_back(v.index);
  return out;
}

}  // namespace tempo::tasks
