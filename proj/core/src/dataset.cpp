#include "chada/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "chada/io.hpp"
#include "chada/random.hpp"

namespace chada {
namespace fs = std::filesystem;

TaskKind parse_task_kind(const std::string& name) {
  if (name == "classification") return TaskKind::Classification;
  if (name == "regression") return TaskKind::Regression;
  if (name == "reconstruction") return TaskKind::Reconstruction;
  throw DataError("unknown task kind '" + name + "'");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Classification: return "classification";
    case TaskKind::Regression: return "regression";
    case TaskKind::Reconstruction: return "reconstruction";
  }
  return "?";
}

namespace {

template <typename Entries>
std::vector<std::size_t> split_indices(const Entries& entries, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw DataError(where + ": expected a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
        allowed.end()) {
      throw DataError(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  return split_indices(entries, split);
}

std::vector<std::size_t> Dataset::indices(Split split) const { return split_indices(samples, split); }

std::string resolve_path(const std::string& manifest_path, const std::string& entry_path) {
  const fs::path p(entry_path);
  if (p.is_absolute()) return entry_path;
  return (fs::path(manifest_path).parent_path() / p).string();
}

DatasetManifest load_manifest(const std::string& path, bool check_files) {
  const auto bytes = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  check_keys(doc, {"task", "target_channel", "entries"}, path);
  DatasetManifest m;
  try {
    m.kind = parse_task_kind(doc.at("task").get<std::string>());
    if (doc.contains("target_channel") && !doc["target_channel"].is_null()) {
      m.target_channel = doc["target_channel"].get<std::size_t>();
    }
    if (m.kind == TaskKind::Reconstruction && !m.target_channel) {
      throw DataError(path + ": reconstruction manifest needs target_channel");
    }
    for (const auto& e : doc.at("entries")) {
      check_keys(e, {"path", "label", "split"}, path + " entry");
      ManifestEntry entry;
      entry.path = e.at("path").get<std::string>();
      entry.label = e.value("label", 0.0);
      const auto split = e.value("split", std::string("train"));
      if (split != "train" && split != "test") {
        throw DataError(path + ": entry " + entry.path + " has split '" + split + "'");
      }
      entry.split = split == "train" ? Split::Train : Split::Test;
      if (m.kind == TaskKind::Classification &&
          (entry.label < 0 || entry.label != std::floor(entry.label))) {
        throw DataError(path + ": entry " + entry.path + " has non-integer class label");
      }
      if (check_files && !fs::exists(resolve_path(path, entry.path))) {
        throw DataError(path + ": missing file " + resolve_path(path, entry.path));
      }
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::ordered_json doc;
  doc["task"] = to_string(manifest.kind);
  doc["target_channel"] = manifest.target_channel ? nlohmann::ordered_json(*manifest.target_channel)
                                                  : nlohmann::ordered_json(nullptr);
  auto entries = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"path", e.path}, {"label", e.label},
                       {"split", e.split == Split::Train ? "train" : "test"}});
  }
  doc["entries"] = std::move(entries);
  const std::string text = doc.dump(2) + "\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Dataset load_dataset(const std::string& manifest_path) {
  const auto m = load_manifest(manifest_path);
  Dataset d;
  d.kind = m.kind;
  d.target_channel = m.target_channel;
  for (const auto& e : m.entries) {
    auto image = read_mcif(resolve_path(manifest_path, e.path));
    normalize_minmax(image);
    d.samples.push_back({std::move(image), e.label, e.split});
  }
  return d;
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "interchannel-xor") return SyntheticKind::InterchannelXor;
  if (name == "intrachannel-shape") return SyntheticKind::IntrachannelShape;
  if (name == "reconstruction") return SyntheticKind::Reconstruction;
  throw DataError("unknown synthetic kind '" + name +
                  "' (expected interchannel-xor, intrachannel-shape or reconstruction)");
}

std::string to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::InterchannelXor: return "interchannel-xor";
    case SyntheticKind::IntrachannelShape: return "intrachannel-shape";
    case SyntheticKind::Reconstruction: return "reconstruction";
  }
  return "?";
}

namespace {

constexpr float kNoise = 0.05f;

void add_noise(std::span<float> plane, Rng& rng) {
  std::uniform_real_distribution<float> u(0.0f, kNoise);
  for (auto& v : plane) v = u(rng);
}

void draw_blob(std::span<float> plane, std::size_t side, Rng& rng) {
  std::uniform_real_distribution<double> pos(0.3 * side, 0.7 * side);
  std::uniform_real_distribution<double> amp(0.6, 0.9);
  const double cy = pos(rng), cx = pos(rng), a = amp(rng), sigma = side / 8.0;
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double r2 = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx);
      plane[y * side + x] += static_cast<float>(a * std::exp(-r2 / (2 * sigma * sigma)));
    }
  }
}

void draw_shape(std::span<float> plane, std::size_t side, bool disk, Rng& rng) {
  std::uniform_real_distribution<double> pos(0.35 * side, 0.65 * side);
  std::uniform_real_distribution<double> rad(0.15 * side, 0.25 * side);
  const double cy = pos(rng), cx = pos(rng), r = rad(rng);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const bool inside = disk ? dy * dy + dx * dx <= r * r : std::max(std::abs(dy), std::abs(dx)) <= r;
      if (inside) plane[y * side + x] += 0.8f;
    }
  }
}

/// 5x5 box blur with clamped borders.
std::vector<float> box_blur(std::span<const float> plane, std::size_t side) {
  std::vector<float> out(plane.size());
  const long s = static_cast<long>(side);
  for (long y = 0; y < s; ++y) {
    for (long x = 0; x < s; ++x) {
      float acc = 0.0f;
      for (long dy = -2; dy <= 2; ++dy) {
        for (long dx = -2; dx <= 2; ++dx) {
          const long yy = std::clamp(y + dy, 0L, s - 1), xx = std::clamp(x + dx, 0L, s - 1);
          acc += plane[static_cast<std::size_t>(yy * s + xx)];
        }
      }
      out[static_cast<std::size_t>(y * s + x)] = acc / 25.0f;
    }
  }
  return out;
}

void clamp_unit(MultiChannelImage& image) {
  for (auto& v : image.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

std::vector<std::uint8_t> xor_presence(std::uint64_t seed, std::size_t index, std::size_t channels) {
  Rng rng(derive_seed(seed, {0x786f72, index}));
  std::vector<std::uint8_t> bits(channels);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng() & 1u);
  return bits;
}

Dataset generate_synthetic(const SyntheticOptions& o) {
  if (o.count == 0 || o.side == 0) throw DataError("synthetic dataset needs positive count and side");
  if (o.channels < 1 || o.channels > 255) throw DataError("synthetic channels must be in 1..255");
  if (o.kind != SyntheticKind::IntrachannelShape && o.channels < 2) {
    throw DataError(to_string(o.kind) + " needs at least 2 channels");
  }
  if (!(o.test_fraction >= 0.0 && o.test_fraction < 1.0)) {
    throw DataError("test_fraction must be in [0, 1)");
  }
  Dataset d;
  d.kind = o.kind == SyntheticKind::Reconstruction ? TaskKind::Reconstruction : TaskKind::Classification;
  if (o.kind == SyntheticKind::Reconstruction) d.target_channel = o.channels - 1;
  const auto n_test = static_cast<std::size_t>(std::llround(o.test_fraction * static_cast<double>(o.count)));
  const std::size_t n_train = o.count - n_test;

  for (std::size_t i = 0; i < o.count; ++i) {
    Rng rng(derive_seed(o.seed, {static_cast<std::uint64_t>(o.kind), i}));
    MultiChannelImage img(o.channels, o.side, o.side);
    for (std::size_t c = 0; c < o.channels; ++c) {
      img.channel_names[c] = "ch" + std::to_string(c);
      add_noise(img.channel(c), rng);
    }
    double label = 0.0;
    switch (o.kind) {
      case SyntheticKind::InterchannelXor: {
        const auto bits = xor_presence(o.seed, i, o.channels);
        unsigned parity = 0;
        for (std::size_t c = 0; c < o.channels; ++c) {
          if (bits[c]) draw_blob(img.channel(c), o.side, rng);
          parity ^= bits[c];
        }
        label = parity;
        break;
      }
      case SyntheticKind::IntrachannelShape: {
        const bool disk = (rng() & 1u) != 0;
        draw_shape(img.channel(0), o.side, disk, rng);
        for (std::size_t c = 1; c < o.channels; ++c) {
          if (rng() & 1u) draw_blob(img.channel(c), o.side, rng);
        }
        label = disk ? 1.0 : 0.0;
        break;
      }
      case SyntheticKind::Reconstruction: {
        const std::size_t target = o.channels - 1;
        for (std::size_t c = 0; c < target; ++c) draw_blob(img.channel(c), o.side, rng);
        clamp_unit(img);
        std::vector<float> mean(img.plane_size(), 0.0f);
        for (std::size_t c = 0; c < target; ++c) {
          const auto src = img.channel(c);
          for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += src[k] / static_cast<float>(target);
        }
        const auto blurred = box_blur(mean, o.side);
        auto dst = img.channel(target);
        for (std::size_t k = 0; k < blurred.size(); ++k) dst[k] = 0.8f * blurred[k] + 0.1f;
        break;
      }
    }
    normalize_minmax(img);
    d.samples.push_back({std::move(img), label, i < n_train ? Split::Train : Split::Test});
  }
  return d;
}

void write_dataset(const std::string& dir, const Dataset& dataset) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.kind = dataset.kind;
  m.target_channel = dataset.target_channel;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.mcif", i);
    write_mcif((fs::path(dir) / name).string(), dataset.samples[i].image);
    m.entries.push_back({name, dataset.samples[i].label, dataset.samples[i].split});
  }
  save_manifest((fs::path(dir) / "manifest.json").string(), m);
}

}  // namespace chada
