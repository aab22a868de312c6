#pragma once

// Synthetic sprite videos with two independent label factors:
//   appearance: sprite shape, texture and colour family, visible in any frame;
//   motion:     trajectory shape, visible only across frames.
// Sprites live on a torus, so the start position is uniform and no trajectory
// ever clips against a border.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tempo/core/rng.hpp"
#include "tempo/core/tensor.hpp"

namespace tempo::data {

inline constexpr std::int64_t kMaxMotionClasses = 4;
inline constexpr std::int64_t kMaxAppearanceClasses = 8;

enum class Motion : std::int64_t { Linear = 0, Circular = 1, Oscillating = 2, Pulsed = 3 };

struct CorpusSpec {
  std::int64_t n_videos = 240;
  std::int64_t frames = 64;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t appearance_classes = 4;
  std::int64_t motion_classes = 4;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

// What the downstream pipeline needs from every video.
struct CorpusRequirements {
  std::int64_t patch_size = 8;
  std::int64_t clip_length = 8;
  std::int64_t max_rate = 8;
};

void validate(const CorpusSpec& spec, const CorpusRequirements& req);

enum class Split { Train, Val };

struct VideoMeta {
  std::string id;
  std::int64_t index = 0;
  std::int64_t appearance_label = 0;
  std::int64_t motion_label = 0;
  Split split = Split::Train;
};

struct VideoRecord {
  VideoMeta meta;
  Tensor<float> frames;  // (T, 3, H, W) in [0, 1]
  std::int64_t length() const { return frames.dim(0); }
};

// Per-video nuisance and trajectory parameters, drawn from the video's own
// sub-seed. Exposed so tests can render controlled pairs.
struct SceneParams {
  std::int64_t appearance = 0;
  Motion motion = Motion::Linear;
  double start_x = 0, start_y = 0;   // pixels
  double heading = 0;                // radians
  double speed = 1.0;                // mean pixels per frame
  double period = 12.0;              // frames, for periodic trajectories
  double spin = 1.0;                 // +1 / -1 orbit direction
  double phase = 0.0;                // oscillation phase
  double radius = 10.0;              // sprite size, pixels
  double orientation = 0.0;          // sprite rotation
  double brightness = 1.0;
  double bg_level = 0.4;
  double bg_tint[3] = {0, 0, 0};
  double bg_wave[2][4] = {{0, 0, 0, 0}, {0, 0, 0, 0}};  // amp, fx, fy, phase
};

std::string video_id(std::int64_t index);

// Labels are balanced (class counts differ by at most one) and drawn by two
// independent permutations; split membership depends only on (seed, id).
std::vector<VideoMeta> corpus_index(const CorpusSpec& spec);

Split split_of(std::uint64_t seed, const std::string& id, double train_fraction);

SceneParams sample_scene(const CorpusSpec& spec, const VideoMeta& meta);

// Sprite centre at frame t (before wrapping onto the torus).
void trajectory(const SceneParams& p, double t, double& x, double& y);

Tensor<float> render(const SceneParams& p, std::int64_t frames, std::int64_t height,
                     std::int64_t width);

VideoRecord render_video(const CorpusSpec& spec, const VideoMeta& meta);

std::vector<VideoRecord> generate_corpus(const CorpusSpec& spec, const CorpusRequirements& req);

// A strided clip: frames start, start + rate, ..., start + (length-1) * rate.
struct ClipSpec {
  std::int64_t video = 0;  // index into the corpus
  std::int64_t start = 0;
  std::int64_t rate = 1;
  std::int64_t length = 1;
  std::vector<std::int64_t> frame_indices() const;
};

struct ClipSample {
  std::string video_id;
  std::int64_t start = 0;
  std::int64_t rate = 1;
  std::int64_t length = 1;
  Tensor<float> frames;  // (L, 3, H, W)
};

// Number of valid start positions, T - (L-1)*rate; throws InputError if <= 0.
std::int64_t start_range(std::int64_t frames, std::int64_t length, std::int64_t rate);

ClipSample gather_clip(const VideoRecord& video, std::int64_t start, std::int64_t rate,
                       std::int64_t length);

// Draws start uniformly from the valid range. `rate` must be in `rate_set`.
ClipSample sample_clip(const VideoRecord& video, std::int64_t length, std::int64_t rate, Rng& rng,
                       std::span<const std::int64_t> rate_set);

}  // namespace tempo::data
