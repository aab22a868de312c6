#include "tempo/ifm/avfs.hpp"

#include <atomic>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include <unistd.h>

namespace tempo::ifm {

namespace {

constexpr char kMagic[4] = {'A', 'V', 'F', 'S'};

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get_le(const char* field) {
    need(sizeof(U), field);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string_view take(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated AVFS data reading ") + field + ": need " +
                            std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                            " left",
                        pos_);
    }
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open AVFS file " + path.string(), 0);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::string encode_avfs(const Tensor<float>& tensor, const nlohmann::json& meta) {
  if (tensor.ndim() > 255) throw ConfigError("AVFS supports at most 255 dims");
  if (!tensor.all_finite()) throw NumericError("refusing to write non-finite tensor to AVFS");
  const std::string meta_text = meta.dump();
  std::string out;
  out.reserve(16 + 8 * tensor.ndim() + meta_text.size() + 4 * tensor.numel());
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kAvfsVersion);
  put_le<std::uint8_t>(out, kDtypeFp32);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.ndim()));
  put_le<std::uint16_t>(out, 0);
  for (auto d : tensor.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  for (float v : tensor.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

TensorRecord decode_avfs(std::string_view bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad AVFS magic", 0);
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kAvfsVersion) {
    throw FormatError("unsupported AVFS version " + std::to_string(version), 4);
  }
  const auto dtype = r.get_le<std::uint8_t>("dtype");
  if (dtype != kDtypeFp32) throw FormatError("unsupported AVFS dtype " + std::to_string(dtype), 8);
  const auto ndim = r.get_le<std::uint8_t>("ndim");
  const auto reserved = r.get_le<std::uint16_t>("reserved");
  if (reserved != 0) throw FormatError("nonzero AVFS reserved field", 10);
  Shape shape;
  std::uint64_t numel = 1;
  for (unsigned i = 0; i < ndim; ++i) {
    const std::size_t at = r.pos();
    const auto d = r.get_le<std::uint64_t>("dims");
    if (d == 0 || d > (1ull << 40)) throw FormatError("invalid AVFS dim " + std::to_string(d), at);
    shape.push_back(static_cast<std::int64_t>(d));
    numel *= d;
    if (numel > (1ull << 40)) throw FormatError("AVFS tensor too large", at);
  }
  const auto meta_len = r.get_le<std::uint32_t>("metadata length");
  const std::size_t meta_at = r.pos();
  auto meta_text = r.take(meta_len, "metadata");
  TensorRecord rec;
  try {
    rec.meta = meta_len == 0 ? nlohmann::json::object() : nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid AVFS metadata JSON: ") + e.what(), meta_at);
  }
  const std::size_t payload_at = r.pos();
  const std::uint64_t payload_bytes = numel * 4;
  if (r.remaining() != payload_bytes) {
    throw FormatError("AVFS payload is " + std::to_string(r.remaining()) + " bytes, header " +
                          shape_str(shape) + " needs " + std::to_string(payload_bytes),
                      payload_at);
  }
  std::vector<float> data(static_cast<std::size_t>(numel));
  for (auto& v : data) v = std::bit_cast<float>(r.get_le<std::uint32_t>("payload"));
  rec.tensor = Tensor<float>(std::move(shape), std::move(data));
  return rec;
}

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& tensor,
                       const nlohmann::json& meta) {
  const std::string bytes = encode_avfs(tensor, meta);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ostringstream suffix;
  static std::atomic<std::uint64_t> counter{0};
  suffix << ".tmp." << ::getpid() << "." << std::hex << std::hash<std::thread::id>{}(std::this_thread::get_id()) << "."
         << counter.fetch_add(1);
  const std::filesystem::path tmp = path.string() + suffix.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorRecord read_tensor_file(const std::filesystem::path& path) {
  return decode_avfs(read_all(path));
}

std::string_view source_name(FeatureSource source) {
  return source == FeatureSource::Stub ? "stub" : "imported";
}

FeatureSource parse_source(std::string_view name) {
  if (name == "stub") return FeatureSource::Stub;
  if (name == "imported") return FeatureSource::Imported;
  throw ConfigError("unknown feature source '" + std::string(name) + "'");
}

void FeatureSequence::validate() const {
  if (features.ndim() != 4) {
    throw ConfigError("feature sequence must be (T,C,Hf,Wf), got " + shape_str(features.shape()));
  }
  if (static_cast<std::int64_t>(frame_indices.size()) != features.dim(0)) {
    throw ConfigError("feature sequence has " + std::to_string(frame_indices.size()) +
                      " frame indices for T=" + std::to_string(features.dim(0)));
  }
  for (std::size_t i = 1; i < frame_indices.size(); ++i) {
    if (frame_indices[i] <= frame_indices[i - 1]) {
      throw ConfigError("frame indices must be strictly increasing");
    }
  }
}

FeatureSequence FeatureSequence::select(const std::vector<std::int64_t>& positions) const {
  const std::int64_t frame = channels() * grid_h() * grid_w();
  FeatureSequence out;
  out.source = source;
  out.video_id = video_id;
  out.features = Tensor<float>(Shape{static_cast<std::int64_t>(positions.size()), channels(),
                                     grid_h(), grid_w()});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::int64_t p = positions[i];
    if (p < 0 || p >= frames()) throw InputError("frame position out of range");
    std::copy_n(features.raw() + p * frame, frame,
                out.features.raw() + static_cast<std::int64_t>(i) * frame);
    out.frame_indices.push_back(frame_indices[static_cast<std::size_t>(p)]);
  }
  return out;
}

void write_feature_file(const FeatureSequence& fs, const std::filesystem::path& path) {
  fs.validate();
  nlohmann::json meta = {{"video_id", fs.video_id},
                         {"frame_indices", fs.frame_indices},
                         {"source", source_name(fs.source)}};
  write_tensor_file(path, fs.features, meta);
}

FeatureSequence read_feature_file(const std::filesystem::path& path) {
  TensorRecord rec = read_tensor_file(path);
  FeatureSequence fs;
  try {
    fs.video_id = rec.meta.at("video_id").get<std::string>();
    fs.frame_indices = rec.meta.at("frame_indices").get<std::vector<std::int64_t>>();
    fs.source = parse_source(rec.meta.at("source").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature file metadata incomplete: ") + e.what(), 0);
  }
  fs.features = std::move(rec.tensor);
  fs.validate();
  return fs;
}

}  // namespace tempo::ifm
