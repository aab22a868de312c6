#include "tempo/ifm/stub_encoder.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "tempo/core/error.hpp"
#include "tempo/core/rng.hpp"

namespace tempo::ifm {

namespace {

constexpr double kProjGain = 3.0;
constexpr double kMixGain = 1.6;

Tensor<float> gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

// out[c, p] = tanh-free affine: b[c] + sum_k w[c, k] * in[k, p]
void affine(const float* w, const float* b, const float* in, std::int64_t cout, std::int64_t cin,
            std::int64_t positions, double* out) {
  for (std::int64_t c = 0; c < cout; ++c) {
    for (std::int64_t p = 0; p < positions; ++p) out[c * positions + p] = b[c];
    for (std::int64_t k = 0; k < cin; ++k) {
      const double wk = w[c * cin + k];
      const float* row = in + k * positions;
      double* o = out + c * positions;
      for (std::int64_t p = 0; p < positions; ++p) o[p] += wk * row[p];
    }
  }
}

// Mean over the valid 3x3 neighbourhood of every grid cell, per channel.
void smooth3x3(std::vector<float>& x, std::int64_t channels, std::int64_t gh, std::int64_t gw) {
  std::vector<float> out(x.size());
  for (std::int64_t c = 0; c < channels; ++c) {
    const float* src = x.data() + c * gh * gw;
    float* dst = out.data() + c * gh * gw;
    for (std::int64_t i = 0; i < gh; ++i) {
      for (std::int64_t j = 0; j < gw; ++j) {
        double acc = 0;
        int n = 0;
        for (std::int64_t di = -1; di <= 1; ++di) {
          for (std::int64_t dj = -1; dj <= 1; ++dj) {
            const std::int64_t y = i + di, z = j + dj;
            if (y < 0 || y >= gh || z < 0 || z >= gw) continue;
            acc += src[y * gw + z];
            ++n;
          }
        }
        dst[i * gw + j] = static_cast<float>(acc / n);
      }
    }
  }
  x.swap(out);
}

}  // namespace

void StubEncoderConfig::validate() const {
  if (patch_size < 1 || feature_dim < 1 || depth < 0) {
    throw ConfigError("stub encoder needs positive patch size and feature dim, depth >= 0");
  }
}

StubEncoder::StubEncoder(const StubEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t P = cfg.patch_size, C = cfg.feature_dim;
  const std::int64_t in = 3 * P * P;
  Rng rng(cfg.seed, "stub-encoder");
  params_.emplace_back("proj_w", gaussian({C, in}, kProjGain / std::sqrt(static_cast<double>(in)), rng), false);
  params_.emplace_back("proj_b", gaussian({C}, 0.1, rng), false);
  for (std::int64_t l = 0; l < cfg.depth; ++l) {
    params_.emplace_back("mix" + std::to_string(l) + "_w",
                         gaussian({C, C}, kMixGain / std::sqrt(static_cast<double>(C)), rng), false);
    params_.emplace_back("mix" + std::to_string(l) + "_b", gaussian({C}, 0.1, rng), false);
  }
}

Tensor<float> StubEncoder::encode(const Tensor<float>& frames) const {
  if (frames.ndim() != 4 || frames.dim(1) != 3) {
    throw ConfigError("stub encoder expects (T,3,H,W), got " + shape_str(frames.shape()));
  }
  const std::int64_t T = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
  const std::int64_t P = cfg_.patch_size, C = cfg_.feature_dim;
  if (H % P != 0 || W % P != 0) {
    throw ConfigError("frame " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by patch size " + std::to_string(P));
  }
  const std::int64_t gh = H / P, gw = W / P, npos = gh * gw, in = 3 * P * P;
  Tensor<float> out(Shape{T, C, gh, gw});
  std::vector<float> patches(static_cast<std::size_t>(in * npos));
  std::vector<float> x(static_cast<std::size_t>(C * npos));
  std::vector<double> acc(static_cast<std::size_t>(C * npos));
  for (std::int64_t t = 0; t < T; ++t) {
    // patches laid out (3*P*P, positions), pixels centred around zero
    for (std::int64_t c = 0; c < 3; ++c) {
      const float* plane = frames.raw() + (t * 3 + c) * H * W;
      for (std::int64_t py = 0; py < P; ++py) {
        for (std::int64_t px = 0; px < P; ++px) {
          float* row = patches.data() + ((c * P + py) * P + px) * npos;
          for (std::int64_t i = 0; i < gh; ++i) {
            for (std::int64_t j = 0; j < gw; ++j) {
              row[i * gw + j] = plane[(i * P + py) * W + j * P + px] - 0.5f;
            }
          }
        }
      }
    }
    affine(params_[0].value().raw(), params_[1].value().raw(), patches.data(), C, in, npos, acc.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(acc[i]);
    for (std::int64_t l = 0; l < cfg_.depth; ++l) {
      if (l > 0) smooth3x3(x, C, gh, gw);
      const auto& w = params_[static_cast<std::size_t>(2 + 2 * l)].value();
      const auto& b = params_[static_cast<std::size_t>(3 + 2 * l)].value();
      affine(w.raw(), b.raw(), x.data(), C, C, npos, acc.data());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(std::tanh(acc[i]));
    }
    std::memcpy(out.raw() + t * C * npos, x.data(), sizeof(float) * x.size());
  }
  return out;
}

std::string StubEncoder::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value().raw());
    for (std::int64_t i = 0; i < 4 * p.numel(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

FeatureSequence encode_frames(const data::ClipSample& clip, const StubEncoder& encoder) {
  FeatureSequence fs;
  fs.features = encoder.encode(clip.frames);
  fs.source = FeatureSource::Stub;
  fs.video_id = clip.video_id;
  for (std::int64_t i = 0; i < clip.length; ++i) fs.frame_indices.push_back(clip.start + i * clip.rate);
  return fs;
}

FeatureSequence encode_frames(const data::ClipSample& clip, const StubEncoderConfig& cfg) {
  return encode_frames(clip, StubEncoder(cfg));
}

}  // namespace tempo::ifm
