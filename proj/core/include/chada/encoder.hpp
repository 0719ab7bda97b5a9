#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chada/config.hpp"
#include "chada/image.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"
#include "chada/tokenizer.hpp"

namespace chada {

/// Pre-norm transformer block: x + MHSA(LN(x)), then h + MLP(LN(h)).
template <typename T>
struct BlockParams {
  Tensor<T> norm1_gamma, norm1_beta;
  Tensor<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  Tensor<T> out_weight, out_bias;
  Tensor<T> norm2_gamma, norm2_beta;
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  static BlockParams init(std::size_t dim, std::size_t mlp_ratio, Rng& rng);
  void append_parameters(ParamList<T>& out, const std::string& prefix) const;
};

/// Block stack plus the final norm; shared by every encoder variant.
template <typename T>
struct TransformerParams {
  std::vector<BlockParams<T>> blocks;
  Tensor<T> norm_gamma, norm_beta;

  static TransformerParams init(std::size_t dim, std::size_t depth, std::size_t mlp_ratio, Rng& rng);
  void append_parameters(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct EncoderParams {
  EmbeddingTables<T> tables;
  TransformerParams<T> transformer;

  static EncoderParams init(const EncoderConfig& config, Rng& rng);
  /// Named handles onto every learnable tensor, in a stable order.
  ParamList<T> parameters() const;
};

/// Attention weights captured from one layer: [B, heads, T, T].
template <typename T>
struct AttentionCapture {
  std::size_t layer = 0;
  Tensor<T> weights;
};

/// Multi-head self-attention over x [B, T, d] in which keys with mask == 0 are
/// excluded from the softmax (their logits are -inf). Rows at masked query
/// positions are computed but carry no meaning and are never read.
/// Throws std::invalid_argument if any sequence has no real token.
template <typename T>
Tensor<T> masked_multihead_attention(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                                     const BlockParams<T>& block, std::size_t heads,
                                     Tensor<T>* weights_out = nullptr);

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                            const BlockParams<T>& block, std::size_t heads, double norm_eps,
                            Tensor<T>* weights_out = nullptr);

/// Runs every block with the same mask, then the final norm. tokens: [B, T, d].
template <typename T>
Tensor<T> run_transformer(const Tensor<T>& tokens, std::span<const std::uint8_t> mask,
                          const TransformerParams<T>& params, std::size_t heads, double norm_eps,
                          AttentionCapture<T>* capture = nullptr);

/// [B, T, d] -> [B, d]: the CLS row, or the mean over real non-CLS rows.
template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& hidden, std::span<const std::uint8_t> mask, Pooling pooling);

/// Concatenates sequences of equal length into a [B, T, d] batch and its mask.
template <typename T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> stack_sequences(
    const std::vector<TokenSequence<T>>& sequences);

/// Embeddings [B, d] for a batch of images (differentiable when recording).
template <typename T>
Tensor<T> encode_batch(std::span<const MultiChannelImage> images, const EncoderParams<T>& params,
                       const EncoderConfig& config);

/// l = Phi(I): a d-wide embedding whatever the channel count.
template <typename T>
std::vector<T> encode(const MultiChannelImage& image, const EncoderParams<T>& params,
                      const EncoderConfig& config);

/// Attention weights of one layer for a single image, restricted to real tokens.
template <typename T>
struct AttentionMaps {
  std::size_t heads = 0;
  std::size_t tokens = 0;   // 1 + n * m real tokens
  std::size_t channels = 0;
  std::size_t grid = 0;
  std::vector<T> weights;  // [heads, tokens, tokens]

  T at(std::size_t head, std::size_t query, std::size_t key) const {
    return weights[(head * tokens + query) * tokens + key];
  }
  /// CLS-query weights of one head over the patches of one channel, as a grid x grid map.
  std::vector<T> cls_heatmap(std::size_t head, std::size_t channel) const;
};

/// Throws std::out_of_range if layer >= depth.
template <typename T>
AttentionMaps<T> attention_maps(const MultiChannelImage& image, const EncoderParams<T>& params,
                                const EncoderConfig& config, std::size_t layer);

/// Closed-form learnable-parameter count for a configuration.
std::size_t parameter_census(const EncoderConfig& config);

}  // namespace chada
