#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chada/config.hpp"
#include "chada/image.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"

namespace chada {

/// One p x p block of a channel. (row, col) is the grid cell; values are row-major.
struct Patch {
  std::size_t channel = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  std::vector<float> values;
};

/// Splits one H x W channel into non-overlapping p x p patches in row-major
/// grid order. Throws std::invalid_argument if H or W is not a multiple of p.
std::vector<Patch> patchify_channel(std::span<const float> channel, std::size_t height,
                                    std::size_t width, std::size_t patch, std::size_t channel_index = 0);

/// Inverse of patchify_channel.
std::vector<float> assemble_channel(std::span<const Patch> patches, std::size_t height,
                                    std::size_t width, std::size_t patch);

/// Learnable embedding tables shared by every image.
///
/// The patch projection is a flatten-then-linear map p*p -> d, which equals a
/// kernel-p, stride-p convolution applied to the channel. The padding token is
/// all zeros and is not stored.
template <typename T>
struct EmbeddingTables {
  Tensor<T> patch_weight;  // [p*p, d]
  Tensor<T> patch_bias;    // [d]
  Tensor<T> pos;           // [m, d], one row per grid cell, shared across channels
  Tensor<T> chan;          // [N_max, d], one row per channel slot; undefined without channel table
  Tensor<T> cls;           // [1, d]

  static EmbeddingTables init(const EncoderConfig& config, Rng& rng);
  void append_parameters(ParamList<T>& out, const std::string& prefix) const;
};

/// Fixed-length token matrix plus key-padding mask (1 = real token, 0 = padding).
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [length, d]
  std::vector<std::uint8_t> key_padding_mask;
  std::size_t n_channels = 0;

  std::size_t length() const { return key_padding_mask.size(); }
  std::size_t real_count() const;
};

/// Stacks the patches of one or more channels into a [count, p*p] matrix.
template <typename T>
Tensor<T> patch_matrix(std::span<const Patch> patches);

/// token = flatten(patch) * W + b, same W for every patch of every channel.
template <typename T>
Tensor<T> project_patches(const Tensor<T>& patches, const EmbeddingTables<T>& tables);

/// tokens[(x, y)] + pos[(x, y)] + chan[c] for the m tokens of channel c.
/// Throws std::out_of_range if c >= N_max.
template <typename T>
Tensor<T> add_embeddings(const Tensor<T>& tokens, std::size_t channel, const EmbeddingTables<T>& tables,
                         const EncoderConfig& config);

/// Concatenates n channel blocks and appends zero padding up to N_max * m rows.
/// The returned sequence has no CLS token yet.
template <typename T>
TokenSequence<T> pad_and_mask(const std::vector<Tensor<T>>& blocks, const EncoderConfig& config);

/// patchify -> project -> embed -> pad -> prepend CLS.
template <typename T>
TokenSequence<T> build_sequence(const MultiChannelImage& image, const EmbeddingTables<T>& tables,
                                const EncoderConfig& config);

}  // namespace chada
