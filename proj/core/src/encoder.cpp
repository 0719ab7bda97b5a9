#include "chada/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "chada/ops.hpp"

namespace chada {
namespace {

template <typename T>
Tensor<T> init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<T> w({rows, cols});
  fill_truncated_normal(w, 0.02, rng);
  return w;
}

}  // namespace

template <typename T>
BlockParams<T> BlockParams<T>::init(std::size_t dim, std::size_t mlp_ratio, Rng& rng) {
  const std::size_t hidden = dim * mlp_ratio;
  BlockParams b;
  b.norm1_gamma = Tensor<T>({dim}, T(1));
  b.norm1_beta = Tensor<T>({dim});
  b.q_weight = init_weight<T>(dim, dim, rng);
  b.q_bias = Tensor<T>({dim});
  b.k_weight = init_weight<T>(dim, dim, rng);
  b.k_bias = Tensor<T>({dim});
  b.v_weight = init_weight<T>(dim, dim, rng);
  b.v_bias = Tensor<T>({dim});
  b.out_weight = init_weight<T>(dim, dim, rng);
  b.out_bias = Tensor<T>({dim});
  b.norm2_gamma = Tensor<T>({dim}, T(1));
  b.norm2_beta = Tensor<T>({dim});
  b.fc1_weight = init_weight<T>(dim, hidden, rng);
  b.fc1_bias = Tensor<T>({hidden});
  b.fc2_weight = init_weight<T>(hidden, dim, rng);
  b.fc2_bias = Tensor<T>({dim});
  return b;
}

template <typename T>
void BlockParams<T>::append_parameters(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + "norm1.gamma", norm1_gamma});
  out.push_back({prefix + "norm1.beta", norm1_beta});
  out.push_back({prefix + "attn.q.weight", q_weight});
  out.push_back({prefix + "attn.q.bias", q_bias});
  out.push_back({prefix + "attn.k.weight", k_weight});
  out.push_back({prefix + "attn.k.bias", k_bias});
  out.push_back({prefix + "attn.v.weight", v_weight});
  out.push_back({prefix + "attn.v.bias", v_bias});
  out.push_back({prefix + "attn.out.weight", out_weight});
  out.push_back({prefix + "attn.out.bias", out_bias});
  out.push_back({prefix + "norm2.gamma", norm2_gamma});
  out.push_back({prefix + "norm2.beta", norm2_beta});
  out.push_back({prefix + "mlp.fc1.weight", fc1_weight});
  out.push_back({prefix + "mlp.fc1.bias", fc1_bias});
  out.push_back({prefix + "mlp.fc2.weight", fc2_weight});
  out.push_back({prefix + "mlp.fc2.bias", fc2_bias});
}

template <typename T>
TransformerParams<T> TransformerParams<T>::init(std::size_t dim, std::size_t depth,
                                                std::size_t mlp_ratio, Rng& rng) {
  TransformerParams p;
  p.blocks.reserve(depth);
  for (std::size_t i = 0; i < depth; ++i) p.blocks.push_back(BlockParams<T>::init(dim, mlp_ratio, rng));
  p.norm_gamma = Tensor<T>({dim}, T(1));
  p.norm_beta = Tensor<T>({dim});
  return p;
}

template <typename T>
void TransformerParams<T>::append_parameters(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].append_parameters(out, prefix + "blocks." + std::to_string(i) + ".");
  }
  out.push_back({prefix + "norm.gamma", norm_gamma});
  out.push_back({prefix + "norm.beta", norm_beta});
}

template <typename T>
EncoderParams<T> EncoderParams<T>::init(const EncoderConfig& config, Rng& rng) {
  EncoderParams p;
  p.tables = EmbeddingTables<T>::init(config, rng);
  p.transformer = TransformerParams<T>::init(config.dim, config.depth, config.mlp_ratio, rng);
  return p;
}

template <typename T>
ParamList<T> EncoderParams<T>::parameters() const {
  ParamList<T> out;
  tables.append_parameters(out, "embed.");
  transformer.append_parameters(out, "");
  return out;
}

template <typename T>
Tensor<T> masked_multihead_attention(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                                     const BlockParams<T>& block, std::size_t heads,
                                     Tensor<T>* weights_out) {
  if (x.rank() != 3) throw ShapeError("attention input must be [B,T,d], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), dim = x.dim(2);
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("attention width " + std::to_string(dim) +
                                " is not divisible by heads " + std::to_string(heads));
  }
  if (mask.size() != batch * len) {
    throw ShapeError("attention mask has " + std::to_string(mask.size()) + " entries for input " +
                     to_string(x.shape()));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const auto row = mask.subspan(b * len, len);
    if (std::none_of(row.begin(), row.end(), [](std::uint8_t v) { return v != 0; })) {
      throw std::invalid_argument("attention mask of sequence " + std::to_string(b) +
                                  " has no real token");
    }
  }
  const std::size_t hd = dim / heads;
  auto split = [&](const Tensor<T>& t) {
    return ops::permute(ops::reshape(t, {batch, len, heads, hd}), {0, 2, 1, 3});
  };
  auto q = split(ops::linear(x, block.q_weight, block.q_bias));
  auto k = split(ops::linear(x, block.k_weight, block.k_bias));
  auto v = split(ops::linear(x, block.v_weight, block.v_bias));
  auto scores = ops::scale(ops::matmul(q, ops::transpose_last2(k)),
                           T(1) / std::sqrt(static_cast<T>(hd)));
  auto weights = ops::softmax_lastdim(ops::mask_keys(scores, mask));
  if (weights_out != nullptr) *weights_out = weights;
  auto ctx = ops::reshape(ops::permute(ops::matmul(weights, v), {0, 2, 1, 3}), {batch, len, dim});
  return ops::linear(ctx, block.out_weight, block.out_bias);
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                            const BlockParams<T>& block, std::size_t heads, double norm_eps,
                            Tensor<T>* weights_out) {
  const T eps = static_cast<T>(norm_eps);
  auto attn = masked_multihead_attention(ops::layer_norm(x, block.norm1_gamma, block.norm1_beta, eps),
                                         mask, block, heads, weights_out);
  auto h = ops::add(x, attn);
  auto mlp = ops::layer_norm(h, block.norm2_gamma, block.norm2_beta, eps);
  mlp = ops::gelu(ops::linear(mlp, block.fc1_weight, block.fc1_bias));
  mlp = ops::linear(mlp, block.fc2_weight, block.fc2_bias);
  return ops::add(h, mlp);
}

template <typename T>
Tensor<T> run_transformer(const Tensor<T>& tokens, std::span<const std::uint8_t> mask,
                          const TransformerParams<T>& params, std::size_t heads, double norm_eps,
                          AttentionCapture<T>* capture) {
  if (capture != nullptr && capture->layer >= params.blocks.size()) {
    throw std::out_of_range("attention layer " + std::to_string(capture->layer) +
                            " out of range for depth " + std::to_string(params.blocks.size()));
  }
  Tensor<T> h = tokens;
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    Tensor<T>* sink = capture != nullptr && capture->layer == i ? &capture->weights : nullptr;
    h = transformer_block(h, mask, params.blocks[i], heads, norm_eps, sink);
  }
  return ops::layer_norm(h, params.norm_gamma, params.norm_beta, static_cast<T>(norm_eps));
}

template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& hidden, std::span<const std::uint8_t> mask, Pooling pooling) {
  const std::size_t batch = hidden.dim(0), len = hidden.dim(1), dim = hidden.dim(2);
  auto flat = ops::reshape(hidden, {batch * len, dim});
  if (pooling == Pooling::Cls) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * len;
    return ops::gather_rows(flat, std::span<const std::size_t>(rows));
  }
  // Mean over real tokens, CLS excluded, as a constant [B, B*T] averaging matrix.
  Tensor<T> avg({batch, batch * len});
  auto w = avg.mutable_values();
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 1; t < len; ++t) count += mask[b * len + t] ? 1 : 0;
    if (count == 0) {
      throw std::invalid_argument("mean pooling needs at least one real non-CLS token");
    }
    for (std::size_t t = 1; t < len; ++t) {
      if (mask[b * len + t]) w[b * batch * len + b * len + t] = T(1) / static_cast<T>(count);
    }
  }
  return ops::matmul(avg, flat);
}

template <typename T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> stack_sequences(
    const std::vector<TokenSequence<T>>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("stack_sequences: empty batch");
  const std::size_t len = sequences[0].length();
  const std::size_t dim = sequences[0].tokens.dim(1);
  std::vector<Tensor<T>> parts;
  std::vector<std::uint8_t> mask;
  parts.reserve(sequences.size());
  mask.reserve(sequences.size() * len);
  for (const auto& s : sequences) {
    if (s.length() != len) throw ShapeError("stack_sequences: sequences differ in length");
    parts.push_back(s.tokens);
    mask.insert(mask.end(), s.key_padding_mask.begin(), s.key_padding_mask.end());
  }
  auto tokens = ops::reshape(ops::concat_rows(parts), {sequences.size(), len, dim});
  return {tokens, std::move(mask)};
}

template <typename T>
Tensor<T> encode_batch(std::span<const MultiChannelImage> images, const EncoderParams<T>& params,
                       const EncoderConfig& config) {
  std::vector<TokenSequence<T>> seqs;
  seqs.reserve(images.size());
  for (const auto& img : images) seqs.push_back(build_sequence(img, params.tables, config));
  auto [tokens, mask] = stack_sequences(seqs);
  auto hidden = run_transformer(tokens, mask, params.transformer, config.heads, config.norm_eps);
  return pool_tokens(hidden, mask, config.pooling);
}

template <typename T>
std::vector<T> encode(const MultiChannelImage& image, const EncoderParams<T>& params,
                      const EncoderConfig& config) {
  auto out = encode_batch(std::span<const MultiChannelImage>(&image, 1), params, config);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
std::vector<T> AttentionMaps<T>::cls_heatmap(std::size_t head, std::size_t channel) const {
  if (head >= heads || channel >= channels) throw std::out_of_range("cls_heatmap index");
  const std::size_t m = grid * grid;
  std::vector<T> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = at(head, 0, 1 + channel * m + i);
  return out;
}

template <typename T>
AttentionMaps<T> attention_maps(const MultiChannelImage& image, const EncoderParams<T>& params,
                                const EncoderConfig& config, std::size_t layer) {
  if (layer >= config.depth || layer >= params.transformer.blocks.size()) {
    throw std::out_of_range("attention layer " + std::to_string(layer) + " out of range for depth " +
                            std::to_string(config.depth));
  }
  std::vector<TokenSequence<T>> seqs{build_sequence(image, params.tables, config)};
  auto [tokens, mask] = stack_sequences(seqs);
  AttentionCapture<T> capture{layer, {}};
  run_transformer(tokens, mask, params.transformer, config.heads, config.norm_eps, &capture);

  AttentionMaps<T> maps;
  maps.heads = config.heads;
  maps.channels = seqs[0].n_channels;
  maps.grid = config.grid();
  const std::size_t len = seqs[0].length();
  // Real tokens form the prefix of the sequence.
  maps.tokens = seqs[0].real_count();
  maps.weights.resize(maps.heads * maps.tokens * maps.tokens);
  const auto w = capture.weights.values();
  for (std::size_t h = 0; h < maps.heads; ++h) {
    for (std::size_t q = 0; q < maps.tokens; ++q) {
      for (std::size_t k = 0; k < maps.tokens; ++k) {
        maps.weights[(h * maps.tokens + q) * maps.tokens + k] = w[(h * len + q) * len + k];
      }
    }
  }
  return maps;
}

std::size_t parameter_census(const EncoderConfig& config) {
  config.validate();
  const std::size_t d = config.dim, hidden = d * config.mlp_ratio;
  const std::size_t pp = config.patch * config.patch;
  std::size_t tables = pp * d + d + config.patches_per_channel() * d + d;
  if (config.channel_embedding) tables += config.max_channels * d;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t mlp = d * hidden + hidden + hidden * d + d;
  const std::size_t norms = 4 * d;
  return tables + config.depth * (attention + mlp + norms) + 2 * d;
}

#define CHADA_INSTANTIATE_ENCODER(T)                                                              \
  template struct BlockParams<T>;                                                                 \
  template struct TransformerParams<T>;                                                           \
  template struct EncoderParams<T>;                                                               \
  template struct AttentionMaps<T>;                                                               \
  template Tensor<T> masked_multihead_attention(const Tensor<T>&, std::span<const std::uint8_t>,  \
                                                const BlockParams<T>&, std::size_t, Tensor<T>*);  \
  template Tensor<T> transformer_block(const Tensor<T>&, std::span<const std::uint8_t>,           \
                                       const BlockParams<T>&, std::size_t, double, Tensor<T>*);   \
  template Tensor<T> run_transformer(const Tensor<T>&, std::span<const std::uint8_t>,             \
                                     const TransformerParams<T>&, std::size_t, double,            \
                                     AttentionCapture<T>*);                                       \
  template Tensor<T> pool_tokens(const Tensor<T>&, std::span<const std::uint8_t>, Pooling);       \
  template std::pair<Tensor<T>, std::vector<std::uint8_t>> stack_sequences(                       \
      const std::vector<TokenSequence<T>>&);                                                      \
  template Tensor<T> encode_batch(std::span<const MultiChannelImage>, const EncoderParams<T>&,     \
                                  const EncoderConfig&);                                          \
  template std::vector<T> encode(const MultiChannelImage&, const EncoderParams<T>&,               \
                                 const EncoderConfig&);                                           \
  template AttentionMaps<T> attention_maps(const MultiChannelImage&, const EncoderParams<T>&,     \
                                           const EncoderConfig&, std::size_t);

CHADA_INSTANTIATE_ENCODER(float)
CHADA_INSTANTIATE_ENCODER(double)

}  // namespace chada
