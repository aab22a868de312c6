#pragma once

// AVFS tensor container (little-endian):
//
//   offset  size        field
//   0       4           magic "AVFS"
//   4       4           version (u32) = 1
//   8       1           dtype (u8), 0 = fp32
//   9       1           ndim (u8)
//   10      2           reserved (u16) = 0
//   12      8 * ndim    dims (u64 each)
//   ...     4           metadata length in bytes (u32)
//   ...     len         UTF-8 JSON metadata
//   ...     4 * numel   fp32 payload, row-major
//
// Used for frozen feature sequences, rendered pixel tensors and checkpoint
// tensors alike.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tempo/core/tensor.hpp"

namespace tempo::ifm {

inline constexpr std::uint32_t kAvfsVersion = 1;
inline constexpr std::uint8_t kDtypeFp32 = 0;

struct TensorRecord {
  Tensor<float> tensor;
  nlohmann::json meta = nlohmann::json::object();
};

std::string encode_avfs(const Tensor<float>& tensor, const nlohmann::json& meta);
TensorRecord decode_avfs(std::string_view bytes);

// Writes to a temporary sibling and renames, so readers never see a partial file.
void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& tensor,
                       const nlohmann::json& meta = nlohmann::json::object());
TensorRecord read_tensor_file(const std::filesystem::path& path);

enum class FeatureSource { Stub, Imported };

std::string_view source_name(FeatureSource source);
FeatureSource parse_source(std::string_view name);

// Frame-wise frozen features of one video, shaped (T, C, Hf, Wf).
struct FeatureSequence {
  Tensor<float> features;
  FeatureSource source = FeatureSource::Stub;
  std::string video_id;
  std::vector<std::int64_t> frame_indices;

  std::int64_t frames() const { return features.dim(0); }
  std::int64_t channels() const { return features.dim(1); }
  std::int64_t grid_h() const { return features.dim(2); }
  std::int64_t grid_w() const { return features.dim(3); }

  // Throws ConfigError on rank or index inconsistencies.
  void validate() const;

  // Sub-sequence of the listed positions (indices into this sequence).
  FeatureSequence select(const std::vector<std::int64_t>& positions) const;
};

void write_feature_file(const FeatureSequence& fs, const std::filesystem::path& path);
FeatureSequence read_feature_file(const std::filesystem::path& path);

}  // namespace tempo::ifm
