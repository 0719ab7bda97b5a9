#pragma once

#include <span>
#include <string>
#include <vector>

#include "chada/config.hpp"
#include "chada/encoder.hpp"
#include "chada/image.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"

namespace chada {

/// Configuration of the single-channel ViT used by one-channel encoding:
/// the same backbone with N_max = 1 and no channel table.
EncoderConfig one_channel_config(EncoderConfig base);

/// Each channel encoded independently by the same single-channel ViT, CLS
/// vectors concatenated in channel order. Width n * d.
template <typename T>
std::vector<T> one_channel_encode(const MultiChannelImage& image, const EncoderParams<T>& vit,
                                  const EncoderConfig& vit_config);

/// Batched form; every image must have the same channel count. [B, n * d].
template <typename T>
Tensor<T> one_channel_encode_batch(std::span<const MultiChannelImage> images,
                                   const EncoderParams<T>& vit, const EncoderConfig& vit_config);

/// Five stride-2 3x3 convolutions (1 -> 8 -> 16 -> 32 -> 64 -> d) with GELU
/// between them, then a spatial mean: one d-vector per channel.
template <typename T>
struct TokenLearnerParams {
  std::vector<Tensor<T>> weights;  // [O, C, 3, 3]
  std::vector<Tensor<T>> biases;   // [O]

  static TokenLearnerParams init(std::size_t dim, Rng& rng);
  void append_parameters(ParamList<T>& out, const std::string& prefix) const;
  std::size_t output_dim() const { return weights.back().dim(0); }
};

/// channels: [N, 1, S, S] -> [N, d].
template <typename T>
Tensor<T> token_learn_batch(const Tensor<T>& channels, const TokenLearnerParams<T>& params);

/// One channel of side x side pixels -> d-vector. Throws std::invalid_argument
/// when the buffer is not side * side or side differs from expected_side.
template <typename T>
std::vector<T> token_learn(std::span<const float> channel, std::size_t side,
                           std::size_t expected_side, const TokenLearnerParams<T>& params);

/// Inter-channel-only encoder: one condensed token per channel plus the
/// channel embedding, a CLS token, padding to 1 + N_max and the transformer.
template <typename T>
struct InterchannelParams {
  TokenLearnerParams<T> learner;
  Tensor<T> chan;  // [N_max, d]
  Tensor<T> cls;   // [1, d]
  TransformerParams<T> transformer;

  static InterchannelParams init(const EncoderConfig& config, Rng& rng);
  ParamList<T> parameters() const;
};

/// 1 + N_max.
inline std::size_t interchannel_sequence_length(const EncoderConfig& config) {
  return 1 + config.max_channels;
}

template <typename T>
Tensor<T> interchannel_encode_batch(std::span<const MultiChannelImage> images,
                                    const InterchannelParams<T>& params,
                                    const EncoderConfig& config);

template <typename T>
std::vector<T> interchannel_encode(const MultiChannelImage& image,
                                   const InterchannelParams<T>& params,
                                   const EncoderConfig& config);

enum class Arch { Chada, OneChannel, Interchannel };

Arch parse_arch(const std::string& name);
std::string to_string(Arch arch);

/// One of the three encoders behind a common interface. For OneChannel the
/// stored config is the single-channel ViT config.
template <typename T>
struct Model {
  Arch arch = Arch::Chada;
  EncoderConfig config;
  EncoderParams<T> vit;             // Chada and OneChannel
  InterchannelParams<T> interchannel;  // Interchannel

  static Model init(Arch arch, const EncoderConfig& config, Rng& rng);
  ParamList<T> parameters() const;
  /// Embedding width for an input with n channels.
  std::size_t embedding_width(std::size_t n_channels) const;
  Tensor<T> embed_batch(std::span<const MultiChannelImage> images) const;
  std::vector<T> embed(const MultiChannelImage& image) const;
};

}  // namespace chada
