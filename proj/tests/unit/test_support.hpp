#pragma once

#include <map>
#include <string>
#include <vector>

#include "tempo/core/rng.hpp"
#include "tempo/data/synth.hpp"
#include "tempo/ifm/feature_cache.hpp"

namespace tempo::fixtures {

// Random features for each video, kept in memory.
class MemoryFeatures : public ifm::FeatureProvider {
 public:
  MemoryFeatures(const std::vector<data::VideoMeta>& videos, Shape frame, std::int64_t frames,
                 std::uint64_t seed) {
    for (const auto& v : videos) {
      ifm::FeatureSequence fs;
      fs.video_id = v.id;
      fs.features = Tensor<float>(Shape{frames, frame[0], frame[1], frame[2]});
      Rng rng(seed, v.id);
      for (auto& x : fs.features.data()) x = static_cast<float>(rng.normal());
      for (std::int64_t i = 0; i < frames; ++i) fs.frame_indices.push_back(i);
      seqs_[v.id] = std::move(fs);
    }
  }
  const ifm::FeatureSequence& video(const std::string& id) override { return seqs_.at(id); }
  ifm::FeatureSequence& mutable_video(const std::string& id) { return seqs_.at(id); }

 private:
  std::map<std::string, ifm::FeatureSequence> seqs_;
};

// Appearance label i % 4, motion label (i / 2) % 3, every fifth video held out.
inline std::vector<data::VideoMeta> metas(std::int64_t n) {
  std::vector<data::VideoMeta> out;
  for (std::int64_t i = 0; i < n; ++i) {
    data::VideoMeta m;
    m.id = data::video_id(i);
    m.index = i;
    m.appearance_label = i % 4;
    m.motion_label = (i / 2) % 3;
    m.split = i % 5 == 0 ? data::Split::Val : data::Split::Train;
    out.push_back(m);
  }
  return out;
}

}  // namespace tempo::fixtures
