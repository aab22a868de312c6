#pragma once

// Checkpoint directory: one AVFS file per named tensor plus manifest.json
// {config, step, rng_state, checksum, tensors, extra}. Written to a sibling
// directory and renamed into place.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "tempo/model/model.hpp"

namespace tempo::model {

struct CheckpointInfo {
  nlohmann::json config = nlohmann::json::object();
  std::int64_t step = 0;
  std::string rng_state;
  std::string checksum;  // filled in on save, verified on load
  nlohmann::json extra = nlohmann::json::object();
};

// Hex digest over tensor names, shapes and payload bytes, in name order.
std::string bundle_checksum(const TensorBundle& tensors);

void save_checkpoint(const std::filesystem::path& dir, const TensorBundle& tensors, CheckpointInfo info);

struct Checkpoint {
  TensorBundle tensors;
  CheckpointInfo info;
};

// Throws FormatError if any tensor is unreadable or the checksum disagrees.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace tempo::model
