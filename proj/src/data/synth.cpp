#include "tempo/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "tempo/core/error.hpp"

namespace tempo::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Base colour per appearance class; shape family is class % 4.
constexpr double kPalette[kMaxAppearanceClasses][3] = {
    {0.92, 0.22, 0.20}, {0.20, 0.80, 0.30}, {0.25, 0.35, 0.95}, {0.95, 0.85, 0.20},
    {0.08, 0.08, 0.10}, {0.80, 0.30, 0.90}, {0.20, 0.85, 0.90}, {0.95, 0.95, 0.95}};

double wrap(double d, double period) {
  d = std::fmod(d, period);
  if (d < -0.5 * period) d += period;
  if (d >= 0.5 * period) d -= period;
  return d;
}

double box_sdf(double x, double y, double hx, double hy) {
  const double qx = std::abs(x) - hx;
  const double qy = std::abs(y) - hy;
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

// Signed distance (pixels, negative inside) and texture gain in sprite-local coordinates.
void sprite_shape(std::int64_t appearance, double radius, double lx, double ly, double& sdf,
                  double& gain) {
  const double r = std::sqrt(lx * lx + ly * ly);
  switch (appearance % 4) {
    case 0:  // shaded disc
      sdf = r - radius;
      gain = 0.7 + 0.3 * std::max(0.0, 1.0 - r / radius);
      break;
    case 1: {  // checkered square
      sdf = box_sdf(lx, ly, 0.82 * radius, 0.82 * radius);
      const bool odd = (static_cast<int>(std::floor(lx / 6.0)) + static_cast<int>(std::floor(ly / 6.0))) & 1;
      gain = odd ? 0.65 : 1.0;
      break;
    }
    case 2:  // flat ring
      sdf = std::abs(r - 0.72 * radius) - 0.28 * radius;
      gain = 1.0;
      break;
    default:  // striped cross
      sdf = std::min(box_sdf(lx, ly, radius, 0.42 * radius), box_sdf(lx, ly, 0.42 * radius, radius));
      gain = 0.8 + 0.2 * std::sin(0.6 * (lx + ly));
      break;
  }
}

}  // namespace

void validate(const CorpusSpec& spec, const CorpusRequirements& req) {
  if (spec.n_videos < 1) throw ConfigError("corpus needs at least one video");
  if (spec.frames < 1 || spec.height < 1 || spec.width < 1) {
    throw ConfigError("corpus frame dimensions must be positive");
  }
  if (spec.appearance_classes < 1 || spec.appearance_classes > kMaxAppearanceClasses) {
    throw ConfigError("appearance classes must be in [1, " + std::to_string(kMaxAppearanceClasses) + "]");
  }
  if (spec.motion_classes < 1 || spec.motion_classes > kMaxMotionClasses) {
    throw ConfigError("motion classes must be in [1, " + std::to_string(kMaxMotionClasses) + "]");
  }
  if (!(spec.train_fraction >= 0.0 && spec.train_fraction <= 1.0)) {
    throw ConfigError("train fraction must be in [0, 1]");
  }
  if (req.patch_size < 1 || spec.height % req.patch_size != 0 || spec.width % req.patch_size != 0) {
    throw ConfigError("frame size " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                      " is not divisible by patch size " + std::to_string(req.patch_size));
  }
  if (req.clip_length < 1 || req.max_rate < 1) throw ConfigError("clip length and rate must be positive");
  if (spec.frames < req.clip_length * req.max_rate) {
    throw ConfigError("T=" + std::to_string(spec.frames) + " is shorter than L*max_rate=" +
                      std::to_string(req.clip_length * req.max_rate));
  }
}

std::string video_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vid%05lld", static_cast<long long>(index));
  return buf;
}

Split split_of(std::uint64_t seed, const std::string& id, double train_fraction) {
  const double u = static_cast<double>(derive_seed(seed, "split/" + id) >> 11) * 0x1.0p-53;
  return u < train_fraction ? Split::Train : Split::Val;
}

std::vector<VideoMeta> corpus_index(const CorpusSpec& spec) {
  const auto n = static_cast<std::size_t>(spec.n_videos);
  auto permutation = [&](std::string_view stream) {
    std::vector<std::int64_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<std::int64_t>(i);
    Rng rng(spec.seed, stream);
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  };
  const auto pa = permutation("appearance-labels");
  const auto pm = permutation("motion-labels");
  std::vector<VideoMeta> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& m = out[i];
    m.index = static_cast<std::int64_t>(i);
    m.id = video_id(m.index);
    m.appearance_label = pa[i] % spec.appearance_classes;
    m.motion_label = pm[i] % spec.motion_classes;
    m.split = split_of(spec.seed, m.id, spec.train_fraction);
  }
  return out;
}

SceneParams sample_scene(const CorpusSpec& spec, const VideoMeta& meta) {
  Rng rng(spec.seed, "video/" + meta.id);
  SceneParams p;
  p.appearance = meta.appearance_label;
  p.motion = static_cast<Motion>(meta.motion_label);
  p.start_x = rng.uniform(0.0, static_cast<double>(spec.width));
  p.start_y = rng.uniform(0.0, static_cast<double>(spec.height));
  p.heading = rng.uniform(0.0, kTwoPi);
  p.speed = rng.uniform(0.75, 1.5);
  p.period = rng.uniform(10.0, 16.0);
  p.spin = rng.uniform() < 0.5 ? -1.0 : 1.0;
  p.phase = rng.uniform(0.0, kTwoPi);
  p.radius = rng.uniform(11.0, 13.0);
  p.orientation = rng.uniform(0.0, 0.5 * std::numbers::pi);
  p.brightness = rng.uniform(0.85, 1.1);
  p.bg_level = rng.uniform(0.41, 0.45);
  for (double& t : p.bg_tint) t = rng.uniform(-0.01, 0.01);
  for (auto& w : p.bg_wave) {
    w[0] = rng.uniform(0.03, 0.07);
    do {
      w[1] = static_cast<double>(rng.uniform_int(-2, 2));
      w[2] = static_cast<double>(rng.uniform_int(-2, 2));
    } while (w[1] == 0 && w[2] == 0);
    w[3] = rng.uniform(0.0, kTwoPi);
  }
  return p;
}

void trajectory(const SceneParams& p, double t, double& x, double& y) {
  const double ux = std::cos(p.heading), uy = std::sin(p.heading);
  const double w = kTwoPi / p.period;
  double along = 0;  // displacement along the heading
  switch (p.motion) {
    case Motion::Linear:
      along = p.speed * t;
      break;
    case Motion::Circular: {
      // velocity s * u(heading + spin * w * t)
      const double r = p.speed / (p.spin * w);
      const double a0 = p.heading, a1 = p.heading + p.spin * w * t;
      x = p.start_x + r * (std::sin(a1) - std::sin(a0));
      y = p.start_y - r * (std::cos(a1) - std::cos(a0));
      return;
    }
    case Motion::Oscillating: {
      const double amp = p.speed * p.period / 4.0;  // mean |velocity| == speed
      along = amp * (std::sin(w * t + p.phase) - std::sin(p.phase));
      break;
    }
    case Motion::Pulsed:
      // speed s * (1 - cos(w t + phase)): surges and near-stops, mean == speed
      along = p.speed * (t - (std::sin(w * t + p.phase) - std::sin(p.phase)) / w);
      break;
  }
  x = p.start_x + along * ux;
  y = p.start_y + along * uy;
}

Tensor<float> render(const SceneParams& p, std::int64_t frames, std::int64_t height,
                     std::int64_t width) {
  if (p.appearance < 0 || p.appearance >= kMaxAppearanceClasses) {
    throw ConfigError("appearance class out of range");
  }
  Tensor<float> out(Shape{frames, 3, height, width});
  const auto plane = static_cast<std::size_t>(height * width);
  std::vector<double> bg(3 * plane);
  for (std::int64_t yy = 0; yy < height; ++yy) {
    for (std::int64_t xx = 0; xx < width; ++xx) {
      const double fx = (static_cast<double>(xx) + 0.5) / static_cast<double>(width);
      const double fy = (static_cast<double>(yy) + 0.5) / static_cast<double>(height);
      double v = p.bg_level;
      for (const auto& w : p.bg_wave) v += w[0] * std::sin(kTwoPi * (w[1] * fx + w[2] * fy) + w[3]);
      for (int c = 0; c < 3; ++c) {
        bg[c * plane + static_cast<std::size_t>(yy * width + xx)] = v + p.bg_tint[c];
      }
    }
  }
  const double* col = kPalette[p.appearance];
  const double co = std::cos(p.orientation), so = std::sin(p.orientation);
  const auto W = static_cast<double>(width), H = static_cast<double>(height);
  float* dst = out.raw();
  for (std::int64_t t = 0; t < frames; ++t) {
    double cx, cy;
    trajectory(p, static_cast<double>(t), cx, cy);
    for (std::int64_t yy = 0; yy < height; ++yy) {
      const double dy = wrap(static_cast<double>(yy) + 0.5 - cy, H);
      for (std::int64_t xx = 0; xx < width; ++xx) {
        const double dx = wrap(static_cast<double>(xx) + 0.5 - cx, W);
        const auto pix = static_cast<std::size_t>(yy * width + xx);
        double alpha = 0, gain = 1;
        if (std::abs(dx) <= p.radius + 1.5 && std::abs(dy) <= p.radius + 1.5) {
          const double lx = co * dx + so * dy, ly = -so * dx + co * dy;
          double sdf;
          sprite_shape(p.appearance, p.radius, lx, ly, sdf, gain);
          alpha = std::clamp(0.5 - sdf, 0.0, 1.0);
        }
        for (int c = 0; c < 3; ++c) {
          const double fg = col[c] * gain * p.brightness;
          const double v = alpha * fg + (1.0 - alpha) * bg[c * plane + pix];
          dst[((t * 3 + c) * height) * width + static_cast<std::int64_t>(pix)] =
              static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

VideoRecord render_video(const CorpusSpec& spec, const VideoMeta& meta) {
  VideoRecord v;
  v.meta = meta;
  v.frames = render(sample_scene(spec, meta), spec.frames, spec.height, spec.width);
  return v;
}

std::vector<VideoRecord> generate_corpus(const CorpusSpec& spec, const CorpusRequirements& req) {
  validate(spec, req);
  std::vector<VideoRecord> out;
  for (const auto& m : corpus_index(spec)) out.push_back(render_video(spec, m));
  return out;
}

std::vector<std::int64_t> ClipSpec::frame_indices() const {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(length));
  for (std::int64_t i = 0; i < length; ++i) idx[static_cast<std::size_t>(i)] = start + i * rate;
  return idx;
}

std::int64_t start_range(std::int64_t frames, std::int64_t length, std::int64_t rate) {
  if (length < 1 || rate < 1) throw InputError("clip length and rate must be positive");
  const std::int64_t n = frames - (length - 1) * rate;
  if (n <= 0) {
    throw InputError("clip of length " + std::to_string(length) + " at rate " + std::to_string(rate) +
                     " does not fit in " + std::to_string(frames) + " frames");
  }
  return n;
}

ClipSample gather_clip(const VideoRecord& video, std::int64_t start, std::int64_t rate,
                       std::int64_t length) {
  const std::int64_t T = video.length();
  const std::int64_t n = start_range(T, length, rate);
  if (start < 0 || start >= n) throw InputError("clip start out of range");
  const Shape& s = video.frames.shape();
  const std::int64_t frame = s[1] * s[2] * s[3];
  ClipSample clip;
  clip.video_id = video.meta.id;
  clip.start = start;
  clip.rate = rate;
  clip.length = length;
  clip.frames = Tensor<float>(Shape{length, s[1], s[2], s[3]});
  for (std::int64_t i = 0; i < length; ++i) {
    std::copy_n(video.frames.raw() + (start + i * rate) * frame, frame, clip.frames.raw() + i * frame);
  }
  return clip;
}

ClipSample sample_clip(const VideoRecord& video, std::int64_t length, std::int64_t rate, Rng& rng,
                       std::span<const std::int64_t> rate_set) {
  if (std::find(rate_set.begin(), rate_set.end(), rate) == rate_set.end()) {
    throw InputError("rate " + std::to_string(rate) + " is not in the configured rate set");
  }
  const std::int64_t n = start_range(video.length(), length, rate);
  return gather_clip(video, rng.uniform_int(0, n - 1), rate, length);
}

}  // namespace tempo::data
