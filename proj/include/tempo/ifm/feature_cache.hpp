#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "tempo/data/synth.hpp"
#include "tempo/ifm/avfs.hpp"
#include "tempo/ifm/stub_encoder.hpp"

namespace tempo::ifm {

// Whole-video frozen features, keyed by video id.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;

  // Features for every stored frame of the video.
  virtual const FeatureSequence& video(const std::string& id) = 0;

  // Slice of video(id) at the given frame indices; InputError if one is absent.
  FeatureSequence get(const std::string& id, const std::vector<std::int64_t>& frame_indices);

  // Per-frame feature shape (C, Hf, Wf); requires at least one video id.
  Shape frame_shape(const std::string& any_id) {
    const auto& s = video(any_id).features.shape();
    return {s[1], s[2], s[3]};
  }
};

// Renders pixels for a video id on demand.
using PixelLoader = std::function<Tensor<float>(const std::string& id)>;

// Stub features persisted under root/<key>/<id>.avfs, where key covers the encoder
// config, its seed and the corpus seed and frame geometry. Decoded sequences are
// also kept in memory.
class StubFeatureCache : public FeatureProvider {
 public:
  StubFeatureCache(std::filesystem::path root, const StubEncoderConfig& cfg,
                   const data::CorpusSpec& corpus, PixelLoader loader);

  const FeatureSequence& video(const std::string& id) override;

  const StubEncoder& encoder() const { return encoder_; }
  const std::filesystem::path& directory() const { return dir_; }

  std::int64_t encodes() const { return encodes_; }
  std::int64_t disk_hits() const { return disk_hits_; }
  std::int64_t warnings() const { return warnings_; }

  // Drops decoded sequences so the next access reads from disk.
  void clear_memory();

 private:
  FeatureSequence load_or_compute(const std::string& id);

  std::filesystem::path dir_;
  StubEncoder encoder_;
  data::CorpusSpec corpus_;
  PixelLoader loader_;
  std::mutex mutex_;
  std::map<std::string, std::unique_ptr<FeatureSequence>> memory_;
  std::atomic<std::int64_t> encodes_{0}, disk_hits_{0}, warnings_{0};
};

std::string stub_cache_key(const StubEncoderConfig& cfg, const data::CorpusSpec& corpus);

// Pre-exported features read from dir/<id>.avfs; shapes are taken as found.
class ImportedFeatures : public FeatureProvider {
 public:
  explicit ImportedFeatures(std::filesystem::path dir) : dir_(std::move(dir)) {}
  const FeatureSequence& video(const std::string& id) override;

 private:
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::map<std::string, std::unique_ptr<FeatureSequence>> memory_;
};

}  // namespace tempo::ifm
