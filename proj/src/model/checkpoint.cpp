#include "tempo/model/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "tempo/core/error.hpp"
#include "tempo/ifm/avfs.hpp"

namespace tempo::model {

namespace fs = std::filesystem;

std::string bundle_checksum(const TensorBundle& tensors) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto eat = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ull;
    }
  };
  for (const auto& [name, t] : tensors) {
    eat(name.data(), name.size());
    for (auto d : t.shape()) eat(&d, sizeof d);
    eat(t.raw(), sizeof(float) * static_cast<std::size_t>(t.numel()));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const fs::path& dir, const TensorBundle& tensors, CheckpointInfo info) {
  info.checksum = bundle_checksum(tensors);
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    ifm::write_tensor_file(tmp / (name + ".avfs"), t, {{"name", name}});
    names.push_back(name);
  }
  const nlohmann::json manifest = {{"config", info.config},   {"step", info.step},
                                   {"rng_state", info.rng_state}, {"checksum", info.checksum},
                                   {"tensors", names},         {"extra", info.extra}};
  {
    std::ofstream out(tmp / "manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + tmp.string());
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no checkpoint manifest in " + dir.string(), 0);
  Checkpoint ck;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
    ck.info.config = m.at("config");
    ck.info.step = m.at("step").get<std::int64_t>();
    ck.info.rng_state = m.at("rng_state").get<std::string>();
    ck.info.checksum = m.at("checksum").get<std::string>();
    ck.info.extra = m.value("extra", nlohmann::json::object());
    for (const auto& n : m.at("tensors")) {
      const auto name = n.get<std::string>();
      ck.tensors[name] = ifm::read_tensor_file(dir / (name + ".avfs")).tensor;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what(), 0);
  }
  const auto sum = bundle_checksum(ck.tensors);
  if (sum != ck.info.checksum) {
    throw FormatError("checkpoint checksum mismatch in " + dir.string() + ": manifest " +
                          ck.info.checksum + ", tensors " + sum,
                      0);
  }
  return ck;
}

}  // namespace tempo::model
