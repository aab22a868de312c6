#pragma once

// Frozen frame-wise encoder standing in for an image foundation model:
// non-overlapping PxP patches -> linear projection to C -> `depth` layers of
// (channel mix + tanh), with a 3x3 neighbour-mean smoothing between layers.

#include <cstdint>
#include <string>
#include <vector>

#include "tempo/data/synth.hpp"
#include "tempo/ifm/avfs.hpp"
#include "tempo/nn/autograd.hpp"

namespace tempo::ifm {

struct StubEncoderConfig {
  std::int64_t patch_size = 8;
  std::int64_t feature_dim = 64;
  std::int64_t depth = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

class StubEncoder {
 public:
  explicit StubEncoder(const StubEncoderConfig& cfg);

  const StubEncoderConfig& config() const { return cfg_; }

  // (T, 3, H, W) pixels -> (T, C, H/P, W/P). Frames are encoded independently,
  // with a fixed summation order, so results do not depend on the SIMD tier.
  Tensor<float> encode(const Tensor<float>& frames) const;

  // All weights; every one is non-trainable.
  const std::vector<nn::Parameter<float>>& parameters() const { return params_; }

  // Hex digest over every weight byte.
  std::string checksum() const;

 private:
  StubEncoderConfig cfg_;
  std::vector<nn::Parameter<float>> params_;  // proj_w, proj_b, then (mix_w, mix_b) per layer
};

FeatureSequence encode_frames(const data::ClipSample& clip, const StubEncoder& encoder);
FeatureSequence encode_frames(const data::ClipSample& clip, const StubEncoderConfig& cfg);

}  // namespace tempo::ifm
