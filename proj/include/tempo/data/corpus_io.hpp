#pragma once

// On-disk corpus: one AVFS pixel tensor per video plus manifest.json.

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "tempo/data/synth.hpp"

namespace tempo::data {

struct CorpusManifest {
  CorpusSpec spec;
  std::vector<VideoMeta> videos;
};

nlohmann::json spec_to_json(const CorpusSpec& spec);
CorpusSpec spec_from_json(const nlohmann::json& j);

std::string split_name(Split s);

// Renders and writes videos one at a time; returns the manifest written.
CorpusManifest write_corpus(const std::filesystem::path& dir, const CorpusSpec& spec,
                            const CorpusRequirements& req);

CorpusManifest read_manifest(const std::filesystem::path& dir);

VideoRecord load_video(const std::filesystem::path& dir, const VideoMeta& meta);

}  // namespace tempo::data
