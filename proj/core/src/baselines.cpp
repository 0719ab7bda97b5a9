#include "chada/baselines.hpp"

#include <cmath>
#include <stdexcept>

#include "chada/ops.hpp"

namespace chada {

EncoderConfig one_channel_config(EncoderConfig base) {
  base.max_channels = 1;
  base.channel_embedding = false;
  return base;
}

template <typename T>
Tensor<T> one_channel_encode_batch(std::span<const MultiChannelImage> images,
                                   const EncoderParams<T>& vit, const EncoderConfig& vit_config) {
  if (images.empty()) throw std::invalid_argument("one_channel_encode: empty batch");
  if (vit_config.max_channels != 1) {
    throw std::invalid_argument("one_channel_encode: ViT config must have max_channels 1");
  }
  const std::size_t n = images[0].channels();
  std::vector<MultiChannelImage> singles;
  singles.reserve(images.size() * n);
  for (const auto& img : images) {
    if (img.channels() != n) {
      throw ShapeError("one_channel_encode: batch mixes " + std::to_string(n) + " and " +
                       std::to_string(img.channels()) + " channels");
    }
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t which[] = {c};
      singles.push_back(img.select_channels(which));
    }
  }
  auto per_channel = encode_batch<T>(singles, vit, vit_config);
  return ops::reshape(per_channel, {images.size(), n * vit_config.dim});
}

template <typename T>
std::vector<T> one_channel_encode(const MultiChannelImage& image, const EncoderParams<T>& vit,
                                  const EncoderConfig& vit_config) {
  auto out = one_channel_encode_batch(std::span<const MultiChannelImage>(&image, 1), vit, vit_config);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
TokenLearnerParams<T> TokenLearnerParams<T>::init(std::size_t dim, Rng& rng) {
  const std::size_t widths[] = {1, 8, 16, 32, 64, dim};
  TokenLearnerParams p;
  for (std::size_t i = 0; i + 1 < std::size(widths); ++i) {
    Tensor<T> w({widths[i + 1], widths[i], 3, 3});
    fill_truncated_normal(w, std::sqrt(2.0 / static_cast<double>(widths[i] * 9)), rng);
    p.weights.push_back(w);
    p.biases.push_back(Tensor<T>({widths[i + 1]}));
  }
  return p;
}

template <typename T>
void TokenLearnerParams<T>::append_parameters(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back({prefix + "conv" + std::to_string(i) + ".weight", weights[i]});
    out.push_back({prefix + "conv" + std::to_string(i) + ".bias", biases[i]});
  }
}

template <typename T>
Tensor<T> token_learn_batch(const Tensor<T>& channels, const TokenLearnerParams<T>& params) {
  if (channels.rank() != 4 || channels.dim(1) != 1) {
    throw ShapeError("token_learn: expected [N, 1, S, S], got " + to_string(channels.shape()));
  }
  auto x = channels;
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    x = ops::conv2d(x, params.weights[i], params.biases[i], 2, 1);
    if (i + 1 < params.weights.size()) x = ops::gelu(x);
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  return ops::mean_lastdim(ops::reshape(x, {n, d, x.dim(2) * x.dim(3)}));
}

template <typename T>
std::vector<T> token_learn(std::span<const float> channel, std::size_t side,
                           std::size_t expected_side, const TokenLearnerParams<T>& params) {
  if (side != expected_side || channel.size() != side * side) {
    throw std::invalid_argument("token_learn: channel is " + std::to_string(side) + "x" +
                                std::to_string(side) + " (" + std::to_string(channel.size()) +
                                " values) but the learner expects side " +
                                std::to_string(expected_side));
  }
  Tensor<T> x({1, 1, side, side}, std::vector<T>(channel.begin(), channel.end()));
  auto out = token_learn_batch(x, params);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
InterchannelParams<T> InterchannelParams<T>::init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  InterchannelParams p;
  p.learner = TokenLearnerParams<T>::init(config.dim, rng);
  p.chan = Tensor<T>({config.max_channels, config.dim});
  fill_truncated_normal(p.chan, 0.02, rng);
  p.cls = Tensor<T>({1, config.dim});
  fill_truncated_normal(p.cls, 0.02, rng);
  p.transformer = TransformerParams<T>::init(config.dim, config.depth, config.mlp_ratio, rng);
  return p;
}

template <typename T>
ParamList<T> InterchannelParams<T>::parameters() const {
  ParamList<T> out;
  learner.append_parameters(out, "learner.");
  out.push_back({"embed.chan", chan});
  out.push_back({"embed.cls", cls});
  transformer.append_parameters(out, "");
  return out;
}

template <typename T>
Tensor<T> interchannel_encode_batch(std::span<const MultiChannelImage> images,
                                    const InterchannelParams<T>& params,
                                    const EncoderConfig& config) {
  if (images.empty()) throw std::invalid_argument("interchannel_encode: empty batch");
  const std::size_t side = config.image_side, d = config.dim, nmax = config.max_channels;
  std::size_t total = 0;
  for (const auto& img : images) {
    img.validate(nmax);
    if (img.height != side || img.width != side) {
      throw std::invalid_argument("interchannel_encode: image is " + std::to_string(img.height) +
                                  "x" + std::to_string(img.width) + " but the encoder expects " +
                                  std::to_string(side) + "x" + std::to_string(side));
    }
    total += img.channels();
  }
  std::vector<T> pixels;
  pixels.reserve(total * side * side);
  for (const auto& img : images) pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
  auto condensed = token_learn_batch(Tensor<T>({total, 1, side, side}, std::move(pixels)), params.learner);

  const std::size_t len = interchannel_sequence_length(config);
  std::vector<Tensor<T>> parts;
  std::vector<std::uint8_t> mask(images.size() * len, 0);
  std::size_t offset = 0;
  for (std::size_t b = 0; b < images.size(); ++b) {
    const std::size_t n = images[b].channels();
    std::vector<std::size_t> rows(n), slots(n);
    for (std::size_t c = 0; c < n; ++c) {
      rows[c] = offset + c;
      slots[c] = c;
    }
    offset += n;
    auto tokens = ops::add(ops::gather_rows(condensed, std::span<const std::size_t>(rows)),
                           ops::gather_rows(params.chan, std::span<const std::size_t>(slots)));
    parts.push_back(params.cls);
    parts.push_back(tokens);
    if (n < nmax) parts.push_back(Tensor<T>({nmax - n, d}));
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * len), 1 + n, std::uint8_t{1});
  }
  auto batch = ops::reshape(ops::concat_rows(parts), {images.size(), len, d});
  auto hidden = run_transformer(batch, mask, params.transformer, config.heads, config.norm_eps);
  return pool_tokens(hidden, mask, config.pooling);
}

template <typename T>
std::vector<T> interchannel_encode(const MultiChannelImage& image,
                                   const InterchannelParams<T>& params,
                                   const EncoderConfig& config) {
  auto out = interchannel_encode_batch(std::span<const MultiChannelImage>(&image, 1), params, config);
  return {out.values().begin(), out.values().end()};
}

Arch parse_arch(const std::string& name) {
  if (name == "chada") return Arch::Chada;
  if (name == "onechannel") return Arch::OneChannel;
  if (name == "interchannel") return Arch::Interchannel;
  throw std::invalid_argument("unknown arch '" + name +
                              "' (expected chada, onechannel or interchannel)");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::Chada: return "chada";
    case Arch::OneChannel: return "onechannel";
    case Arch::Interchannel: return "interchannel";
  }
  return "?";
}

template <typename T>
Model<T> Model<T>::init(Arch arch, const EncoderConfig& config, Rng& rng) {
  Model m;
  m.arch = arch;
  m.config = arch == Arch::OneChannel ? one_channel_config(config) : config;
  if (arch == Arch::Interchannel) {
    m.interchannel = InterchannelParams<T>::init(m.config, rng);
  } else {
    m.vit = EncoderParams<T>::init(m.config, rng);
  }
  return m;
}

template <typename T>
ParamList<T> Model<T>::parameters() const {
  return arch == Arch::Interchannel ? interchannel.parameters() : vit.parameters();
}

template <typename T>
std::size_t Model<T>::embedding_width(std::size_t n_channels) const {
  return arch == Arch::OneChannel ? n_channels * config.dim : config.dim;
}

template <typename T>
Tensor<T> Model<T>::embed_batch(std::span<const MultiChannelImage> images) const {
  switch (arch) {
    case Arch::Chada: return encode_batch(images, vit, config);
    case Arch::OneChannel: return one_channel_encode_batch(images, vit, config);
    case Arch::Interchannel: return interchannel_encode_batch(images, interchannel, config);
  }
  throw std::logic_error("unknown arch");
}

template <typename T>
std::vector<T> Model<T>::embed(const MultiChannelImage& image) const {
  auto out = embed_batch(std::span<const MultiChannelImage>(&image, 1));
  return {out.values().begin(), out.values().end()};
}

#define CHADA_INSTANTIATE_BASELINES(T)                                                             \
  template Tensor<T> one_channel_encode_batch(std::span<const MultiChannelImage>,                 \
                                              const EncoderParams<T>&, const EncoderConfig&);     \
  template std::vector<T> one_channel_encode(const MultiChannelImage&, const EncoderParams<T>&,   \
                                             const EncoderConfig&);                               \
  template struct TokenLearnerParams<T>;                                                          \
  template Tensor<T> token_learn_batch(const Tensor<T>&, const TokenLearnerParams<T>&);           \
  template std::vector<T> token_learn(std::span<const float>, std::size_t, std::size_t,           \
                                      const TokenLearnerParams<T>&);                              \
  template struct InterchannelParams<T>;                                                          \
  template Tensor<T> interchannel_encode_batch(std::span<const MultiChannelImage>,                \
                                               const InterchannelParams<T>&, const EncoderConfig&); \
  template std::vector<T> interchannel_encode(const MultiChannelImage&,                           \
                                              const InterchannelParams<T>&, const EncoderConfig&); \
  template struct Model<T>;

CHADA_INSTANTIATE_BASELINES(float)
CHADA_INSTANTIATE_BASELINES(double)

}  // namespace chada
