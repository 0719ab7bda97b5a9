#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chada/image.hpp"

namespace chada {

enum class TaskKind { Classification, Regression, Reconstruction };

TaskKind parse_task_kind(const std::string& name);
std::string to_string(TaskKind kind);

enum class Split { Train, Test };

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory unless absolute
  double label = 0.0;
  Split split = Split::Train;
};

struct DatasetManifest {
  TaskKind kind = TaskKind::Classification;
  std::optional<std::size_t> target_channel;
  std::vector<ManifestEntry> entries;

  std::vector<std::size_t> indices(Split split) const;
};

/// Strict: unknown keys, non-integer classification labels and missing
/// files raise DataError.
DatasetManifest load_manifest(const std::string& path, bool check_files = true);
void save_manifest(const std::string& path, const DatasetManifest& manifest);
/// Resolves an entry path against the manifest location.
std::string resolve_path(const std::string& manifest_path, const std::string& entry_path);

struct Sample {
  MultiChannelImage image;
  double label = 0.0;
  Split split = Split::Train;
};

struct Dataset {
  TaskKind kind = TaskKind::Classification;
  std::optional<std::size_t> target_channel;
  std::vector<Sample> samples;

  std::vector<std::size_t> indices(Split split) const;
};

Dataset load_dataset(const std::string& manifest_path);

enum class SyntheticKind { InterchannelXor, IntrachannelShape, Reconstruction };

SyntheticKind parse_synthetic_kind(const std::string& name);
std::string to_string(SyntheticKind kind);

struct SyntheticOptions {
  SyntheticKind kind = SyntheticKind::InterchannelXor;
  std::size_t count = 256;
  std::size_t channels = 3;
  std::size_t side = 32;
  std::uint64_t seed = 0;
  double test_fraction = 0.25;
};

/// interchannel-xor: each channel independently holds a Gaussian blob or not,
///   label = parity of the presence bits.
/// intrachannel-shape: label 0 = square, 1 = disk, drawn in channel 0; the
///   other channels hold unrelated blobs.
/// reconstruction: the last channel is a blurred, offset mean of the others.
/// A pure function of the options; sample i depends only on (seed, i).
Dataset generate_synthetic(const SyntheticOptions& options);

/// Blob-presence bits of interchannel-xor sample i (the parity oracle's input).
std::vector<std::uint8_t> xor_presence(std::uint64_t seed, std::size_t index, std::size_t channels);

/// Writes <dir>/sample_XXXXX.mcif plus <dir>/manifest.json.
void write_dataset(const std::string& dir, const Dataset& dataset);

}  // namespace chada
