#include "tempo/ifm/feature_cache.hpp"

#include <algorithm>
#include <cstdio>

#include "tempo/core/error.hpp"
#include "tempo/core/log.hpp"

namespace tempo::ifm {

FeatureSequence FeatureProvider::get(const std::string& id,
                                     const std::vector<std::int64_t>& frame_indices) {
  const FeatureSequence& whole = video(id);
  std::vector<std::int64_t> positions;
  positions.reserve(frame_indices.size());
  for (auto f : frame_indices) {
    auto it = std::lower_bound(whole.frame_indices.begin(), whole.frame_indices.end(), f);
    if (it == whole.frame_indices.end() || *it != f) {
      throw InputError("video " + id + " has no features for frame " + std::to_string(f));
    }
    positions.push_back(it - whole.frame_indices.begin());
  }
  return whole.select(positions);
}

std::string stub_cache_key(const StubEncoderConfig& cfg, const data::CorpusSpec& corpus) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "stub-P%lld-C%lld-d%lld-s%016llx-corpus%016llx-%lldx%lldx%lld",
                static_cast<long long>(cfg.patch_size), static_cast<long long>(cfg.feature_dim),
                static_cast<long long>(cfg.depth), static_cast<unsigned long long>(cfg.seed),
                static_cast<unsigned long long>(corpus.seed), static_cast<long long>(corpus.frames),
                static_cast<long long>(corpus.height), static_cast<long long>(corpus.width));
  return buf;
}

StubFeatureCache::StubFeatureCache(std::filesystem::path root, const StubEncoderConfig& cfg,
                                   const data::CorpusSpec& corpus, PixelLoader loader)
    : dir_(std::move(root) / stub_cache_key(cfg, corpus)),
      encoder_(cfg),
      corpus_(corpus),
      loader_(std::move(loader)) {
  std::filesystem::create_directories(dir_);
}

FeatureSequence StubFeatureCache::load_or_compute(const std::string& id) {
  const auto path = dir_ / (id + ".avfs");
  const Shape expect{corpus_.frames, encoder_.config().feature_dim,
                     corpus_.height / encoder_.config().patch_size,
                     corpus_.width / encoder_.config().patch_size};
  if (std::filesystem::exists(path)) {
    try {
      FeatureSequence fs = read_feature_file(path);
      if (fs.features.shape() != expect || fs.video_id != id || fs.source != FeatureSource::Stub) {
        throw FormatError("cached features do not match the expected entry", 0);
      }
      ++disk_hits_;
      return fs;
    } catch (const std::exception& e) {
      ++warnings_;
      log_warn("feature cache entry " + path.string() + " is unusable (" + e.what() +
               "); recomputing");
    }
  }
  FeatureSequence fs;
  fs.features = encoder_.encode(loader_(id));
  if (fs.features.shape() != expect) {
    throw ConfigError("video " + id + " encodes to " + shape_str(fs.features.shape()) +
                      ", corpus spec implies " + shape_str(expect));
  }
  fs.source = FeatureSource::Stub;
  fs.video_id = id;
  for (std::int64_t t = 0; t < fs.frames(); ++t) fs.frame_indices.push_back(t);
  ++encodes_;
  write_feature_file(fs, path);
  return fs;
}

const FeatureSequence& StubFeatureCache::video(const std::string& id) {
  {
    std::lock_guard lock(mutex_);
    auto it = memory_.find(id);
    if (it != memory_.end()) return *it->second;
  }
  auto fs = std::make_unique<FeatureSequence>(load_or_compute(id));
  std::lock_guard lock(mutex_);
  auto [it, inserted] = memory_.emplace(id, std::move(fs));
  return *it->second;
}

void StubFeatureCache::clear_memory() {
  std::lock_guard lock(mutex_);
  memory_.clear();
}

const FeatureSequence& ImportedFeatures::video(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = memory_.find(id);
  if (it != memory_.end()) return *it->second;
  const auto path = dir_ / (id + ".avfs");
  if (!std::filesystem::exists(path)) {
    throw InputError("no imported features for video " + id + " in " + dir_.string());
  }
  auto fs = std::make_unique<FeatureSequence>(read_feature_file(path));
  if (fs->video_id != id) {
    throw FormatError("feature file " + path.string() + " is for video " + fs->video_id, 0);
  }
  return *memory_.emplace(id, std::move(fs)).first->second;
}

}  // namespace tempo::ifm
