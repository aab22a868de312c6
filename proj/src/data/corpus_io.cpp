#include "tempo/data/corpus_io.hpp"

#include <fstream>

#include "tempo/core/error.hpp"
#include "tempo/ifm/avfs.hpp"

namespace tempo::data {

nlohmann::json spec_to_json(const CorpusSpec& spec) {
  return {{"n_videos", spec.n_videos},
          {"T", spec.frames},
          {"H", spec.height},
          {"W", spec.width},
          {"Ka", spec.appearance_classes},
          {"Km", spec.motion_classes},
          {"seed", spec.seed},
          {"train_fraction", spec.train_fraction}};
}

CorpusSpec spec_from_json(const nlohmann::json& j) {
  CorpusSpec s;
  s.n_videos = j.at("n_videos").get<std::int64_t>();
  s.frames = j.at("T").get<std::int64_t>();
  s.height = j.at("H").get<std::int64_t>();
  s.width = j.at("W").get<std::int64_t>();
  s.appearance_classes = j.at("Ka").get<std::int64_t>();
  s.motion_classes = j.at("Km").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train_fraction = j.at("train_fraction").get<double>();
  return s;
}

std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

CorpusManifest write_corpus(const std::filesystem::path& dir, const CorpusSpec& spec,
                            const CorpusRequirements& req) {
  validate(spec, req);
  std::filesystem::create_directories(dir);
  CorpusManifest m{spec, corpus_index(spec)};
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& meta : m.videos) {
    const VideoRecord v = render_video(spec, meta);
    ifm::write_tensor_file(dir / (meta.id + ".avfs"), v.frames,
                           {{"video_id", meta.id}, {"source", "pixels"}});
    videos.push_back({{"id", meta.id},
                      {"appearance_label", meta.appearance_label},
                      {"motion_label", meta.motion_label},
                      {"split", split_name(meta.split)}});
  }
  const nlohmann::json doc = {{"spec", spec_to_json(spec)}, {"videos", videos}};
  std::ofstream(dir / "manifest.json") << doc.dump(2) << "\n";
  return m;
}

CorpusManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no manifest.json in " + dir.string());
  CorpusManifest m;
  try {
    const auto doc = nlohmann::json::parse(in);
    m.spec = spec_from_json(doc.at("spec"));
    std::int64_t index = 0;
    for (const auto& v : doc.at("videos")) {
      VideoMeta meta;
      meta.id = v.at("id").get<std::string>();
      meta.index = index++;
      meta.appearance_label = v.at("appearance_label").get<std::int64_t>();
      meta.motion_label = v.at("motion_label").get<std::int64_t>();
      meta.split = v.at("split").get<std::string>() == "train" ? Split::Train : Split::Val;
      m.videos.push_back(std::move(meta));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed corpus manifest: " + std::string(e.what()));
  }
  return m;
}

VideoRecord load_video(const std::filesystem::path& dir, const VideoMeta& meta) {
  VideoRecord v;
  v.meta = meta;
  v.frames = ifm::read_tensor_file(dir / (meta.id + ".avfs")).tensor;
  if (v.frames.ndim() != 4 || v.frames.dim(1) != 3) {
    throw ConfigError("video " + meta.id + " has shape " + shape_str(v.frames.shape()));
  }
  return v;
}

}  // namespace tempo::data
