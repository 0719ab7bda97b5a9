#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "chada/image.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"

namespace chada {

/// Base for every malformed-or-missing-data failure.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : DataError {
  using DataError::DataError;
};
struct VersionError : DataError {
  using DataError::DataError;
};
struct UnsupportedDtypeError : DataError {
  using DataError::DataError;
};
struct TruncatedError : DataError {
  using DataError::DataError;
};
/// A checkpoint entry that does not match the receiving parameter list.
struct CheckpointMismatchError : DataError {
  using DataError::DataError;
};

// MCIF: "MCIF", u32 version = 1, u32 H, u32 W, u32 C, u8 dtype (0 = f32),
// C x (u16 length + UTF-8 name), then C*H*W f32; all little-endian.
inline constexpr std::uint32_t kMcifVersion = 1;

std::size_t mcif_header_size(const MultiChannelImage& image);
std::vector<std::uint8_t> encode_mcif(const MultiChannelImage& image);
/// `source` is used in error messages.
MultiChannelImage decode_mcif(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");
void write_mcif(const std::string& path, const MultiChannelImage& image);
MultiChannelImage read_mcif(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

// Checkpoints: <path>.json manifest plus <path>.bin raw f32 LE blob.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_json = "{}";  // opaque JSON object
  std::uint64_t step = 0;
  std::string rng_state;           // textual mt19937_64 state
  ParamList<float> entries;
};

std::string rng_state(const Rng& rng);
void restore_rng(Rng& rng, const std::string& state);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
/// Reads the manifest and blob; entries are fresh tensors.
Checkpoint load_checkpoint(const std::string& path);
/// Copies stored values into `into` (same names, order and shapes); throws
/// CheckpointMismatchError naming the first offending entry.
void copy_entries(const ParamList<float>& stored, ParamList<float>& into);

}  // namespace chada
