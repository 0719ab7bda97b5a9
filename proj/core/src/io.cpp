#include "chada/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

namespace chada {
namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "header")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "channel name length")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4, "header")); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4, "payload"))); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw TruncatedError(source_ + ": truncated " + what + " at byte " + std::to_string(pos_));
    }
  }
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

std::size_t mcif_header_size(const MultiChannelImage& image) {
  std::size_t size = 4 + 4 * 4 + 1;
  for (std::size_t c = 0; c < image.channels(); ++c) {
    size += 2 + (c < image.channel_names.size() ? image.channel_names[c].size() : 0);
  }
  return size;
}

std::vector<std::uint8_t> encode_mcif(const MultiChannelImage& image) {
  const std::size_t n = image.channels();
  if (n < 1 || n > 255 || image.pixels.size() != n * image.plane_size()) {
    throw DataError("MCIF requires 1..255 whole channels, got " + std::to_string(n));
  }
  Writer w;
  w.raw("MCIF");
  w.u32(kMcifVersion);
  w.u32(static_cast<std::uint32_t>(image.height));
  w.u32(static_cast<std::uint32_t>(image.width));
  w.u32(static_cast<std::uint32_t>(n));
  w.u8(0);
  for (std::size_t c = 0; c < n; ++c) {
    const std::string name = c < image.channel_names.size() ? image.channel_names[c] : "";
    if (name.size() > 0xFFFF) throw DataError("channel name longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
  }
  for (float v : image.pixels) w.f32(v);
  return w.take();
}

MultiChannelImage decode_mcif(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  Reader r(bytes, source);
  const std::string magic = r.raw(4, "magic");
  if (magic != "MCIF") throw BadMagicError(source + ": bad magic '" + magic + "'");
  const std::uint32_t version = r.u32();
  if (version != kMcifVersion) {
    throw VersionError(source + ": unsupported MCIF version " + std::to_string(version));
  }
  const std::uint32_t h = r.u32(), w = r.u32(), c = r.u32();
  const std::uint8_t dtype = r.u8();
  if (dtype != 0) throw UnsupportedDtypeError(source + ": unsupported dtype " + std::to_string(dtype));
  if (h == 0 || w == 0 || c == 0 || c > 255) {
    throw DataError(source + ": invalid extents " + std::to_string(h) + "x" + std::to_string(w) +
                    "x" + std::to_string(c));
  }
  MultiChannelImage image(c, h, w);
  for (std::uint32_t i = 0; i < c; ++i) image.channel_names[i] = r.raw(r.u16(), "channel name");
  const std::size_t payload = std::size_t{4} * c * h * w;
  if (r.remaining() < payload) {
    throw TruncatedError(source + ": payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                         std::to_string(payload));
  }
  if (r.remaining() > payload) {
    throw DataError(source + ": " + std::to_string(r.remaining() - payload) + " trailing bytes");
  }
  for (auto& v : image.pixels) v = r.f32();
  return image;
}

void write_mcif(const std::string& path, const MultiChannelImage& image) {
  write_file(path, encode_mcif(image));
}

MultiChannelImage read_mcif(const std::string& path) { return decode_mcif(read_file(path), path); }

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw DataError("corrupt RNG state");
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["step"] = checkpoint.step;
  manifest["rng_state"] = checkpoint.rng_state;
  manifest["config"] = nlohmann::ordered_json::parse(checkpoint.config_json);
  Writer blob;
  std::size_t offset = 0;
  auto entries = nlohmann::ordered_json::array();
  for (const auto& e : checkpoint.entries) {
    entries.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}});
    for (float v : e.tensor.values()) blob.f32(v);
    offset += e.tensor.size() * 4;
  }
  manifest["entries"] = std::move(entries);
  manifest["blob_bytes"] = offset;
  const std::string text = manifest.dump(2) + "\n";
  write_file(path + ".json", std::vector<std::uint8_t>(text.begin(), text.end()));
  write_file(path + ".bin", blob.take());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto text = read_file(path + ".json");
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ".json: " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw VersionError(path + ".json: checkpoint format version " + std::to_string(version) +
                         ", expected " + std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.rng_state = manifest.at("rng_state").get<std::string>();
    ck.config_json = manifest.at("config").dump();
    const auto blob = read_file(path + ".bin");
    const auto expected = manifest.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected) {
      throw TruncatedError(path + ".bin: " + std::to_string(blob.size()) + " bytes, manifest says " +
                           std::to_string(expected));
    }
    const std::string source = path + ".bin";
    Reader r(blob, source);
    std::size_t offset = 0;
    for (const auto& e : manifest.at("entries")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      if (e.at("offset").get<std::size_t>() != offset) {
        throw DataError(path + ".json: entry " + name + " has an inconsistent offset");
      }
      std::vector<float> values(numel(shape));
      for (auto& v : values) v = r.f32();
      offset += values.size() * 4;
      ck.entries.push_back({name, Tensor<float>(shape, std::move(values))});
    }
    if (r.remaining() != 0) throw DataError(source + ": manifest shapes do not cover the blob");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ".json: " + e.what());
  }
}

void copy_entries(const ParamList<float>& stored, ParamList<float>& into) {
  for (std::size_t i = 0; i < into.size(); ++i) {
    const auto& target = into[i];
    if (i >= stored.size()) throw CheckpointMismatchError("checkpoint lacks entry " + target.name);
    const auto& src = stored[i];
    if (src.name != target.name || src.tensor.shape() != target.tensor.shape()) {
      throw CheckpointMismatchError("checkpoint entry " + src.name + " " + to_string(src.tensor.shape()) +
                                    " does not match " + target.name + " " +
                                    to_string(target.tensor.shape()));
    }
    auto dst = into[i].tensor.mutable_values();
    std::copy(src.tensor.values().begin(), src.tensor.values().end(), dst.begin());
  }
  if (stored.size() != into.size()) {
    throw CheckpointMismatchError("checkpoint has " + std::to_string(stored.size() - into.size()) +
                                  " extra entries, first " + stored[into.size()].name);
  }
}

}  // namespace chada
