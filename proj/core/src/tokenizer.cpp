#include "chada/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>

#include "chada/ops.hpp"

namespace chada {

std::vector<Patch> patchify_channel(std::span<const float> channel, std::size_t height,
                                    std::size_t width, std::size_t patch,
                                    std::size_t channel_index) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("cannot patchify " + std::to_string(height) + "x" +
                                std::to_string(width) + " channel with patch size " +
                                std::to_string(patch) + ": H and W must be multiples of p");
  }
  if (channel.size() != height * width) {
    throw std::invalid_argument("channel buffer does not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  const std::size_t rows = height / patch, cols = width / patch;
  std::vector<Patch> out;
  out.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      Patch p{channel_index, r, c, std::vector<float>(patch * patch)};
      for (std::size_t y = 0; y < patch; ++y) {
        const float* src = channel.data() + (r * patch + y) * width + c * patch;
        std::copy_n(src, patch, p.values.data() + y * patch);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<float> assemble_channel(std::span<const Patch> patches, std::size_t height,
                                    std::size_t width, std::size_t patch) {
  std::vector<float> out(height * width, 0.0f);
  for (const auto& p : patches) {
    if (p.values.size() != patch * patch || (p.row + 1) * patch > height ||
        (p.col + 1) * patch > width) {
      throw std::invalid_argument("patch does not fit the target channel");
    }
    for (std::size_t y = 0; y < patch; ++y) {
      std::copy_n(p.values.data() + y * patch, patch,
                  out.data() + (p.row * patch + y) * width + p.col * patch);
    }
  }
  return out;
}

template <typename T>
EmbeddingTables<T> EmbeddingTables<T>::init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.dim, pp = config.patch * config.patch;
  EmbeddingTables t;
  t.patch_weight = Tensor<T>({pp, d});
  t.patch_bias = Tensor<T>({d});
  t.pos = Tensor<T>({config.patches_per_channel(), d});
  t.cls = Tensor<T>({1, d});
  fill_truncated_normal(t.patch_weight, 0.02, rng);
  fill_truncated_normal(t.pos, 0.02, rng);
  if (config.channel_embedding) {
    t.chan = Tensor<T>({config.max_channels, d});
    fill_truncated_normal(t.chan, 0.02, rng);
  }
  fill_truncated_normal(t.cls, 0.02, rng);
  return t;
}

template <typename T>
void EmbeddingTables<T>::append_parameters(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + "patch_weight", patch_weight});
  out.push_back({prefix + "patch_bias", patch_bias});
  out.push_back({prefix + "pos", pos});
  if (chan.defined()) out.push_back({prefix + "chan", chan});
  out.push_back({prefix + "cls", cls});
}

template <typename T>
std::size_t TokenSequence<T>::real_count() const {
  return static_cast<std::size_t>(std::count(key_padding_mask.begin(), key_padding_mask.end(), 1));
}

template <typename T>
Tensor<T> patch_matrix(std::span<const Patch> patches) {
  if (patches.empty()) throw std::invalid_argument("patch_matrix: no patches");
  const std::size_t width = patches[0].values.size();
  std::vector<T> data;
  data.reserve(patches.size() * width);
  for (const auto& p : patches) {
    if (p.values.size() != width) throw std::invalid_argument("patch_matrix: ragged patches");
    data.insert(data.end(), p.values.begin(), p.values.end());
  }
  return Tensor<T>({patches.size(), width}, std::move(data));
}

template <typename T>
Tensor<T> project_patches(const Tensor<T>& patches, const EmbeddingTables<T>& tables) {
  if (patches.rank() != 2 || patches.dim(1) != tables.patch_weight.dim(0)) {
    throw ShapeError("project_patches: patch matrix " + to_string(patches.shape()) +
                     " does not match projection " + to_string(tables.patch_weight.shape()));
  }
  return ops::linear(patches, tables.patch_weight, tables.patch_bias);
}

template <typename T>
Tensor<T> add_embeddings(const Tensor<T>& tokens, std::size_t channel,
                         const EmbeddingTables<T>& tables, const EncoderConfig& config) {
  if (channel >= config.max_channels) {
    throw std::out_of_range("channel index " + std::to_string(channel) + " >= N_max " +
                            std::to_string(config.max_channels));
  }
  auto out = ops::add(tokens, tables.pos);
  if (tables.chan.defined()) {
    const std::size_t row[] = {channel};
    auto chan_row = ops::reshape(ops::gather_rows(tables.chan, row), {config.dim});
    out = ops::add(out, chan_row);
  }
  return out;
}

template <typename T>
TokenSequence<T> pad_and_mask(const std::vector<Tensor<T>>& blocks, const EncoderConfig& config) {
  const std::size_t n = blocks.size();
  if (n < 1 || n > config.max_channels) {
    throw std::invalid_argument("pad_and_mask: channel count " + std::to_string(n) +
                                " outside 1.." + std::to_string(config.max_channels));
  }
  const std::size_t m = config.patches_per_channel();
  for (const auto& b : blocks) {
    if (b.shape() != Shape{m, config.dim}) {
      throw ShapeError("pad_and_mask: channel block " + to_string(b.shape()) + " expected [" +
                       std::to_string(m) + "," + std::to_string(config.dim) + "]");
    }
  }
  std::vector<Tensor<T>> parts = blocks;
  const std::size_t padded = (config.max_channels - n) * m;
  if (padded > 0) parts.push_back(Tensor<T>({padded, config.dim}));
  TokenSequence<T> seq;
  seq.tokens = ops::concat_rows(parts);
  seq.key_padding_mask.assign(config.max_channels * m, 0);
  std::fill_n(seq.key_padding_mask.begin(), n * m, std::uint8_t{1});
  seq.n_channels = n;
  return seq;
}

template <typename T>
TokenSequence<T> build_sequence(const MultiChannelImage& image, const EmbeddingTables<T>& tables,
                                const EncoderConfig& config) {
  image.validate(config.max_channels);
  if (image.height != config.image_side || image.width != config.image_side) {
    throw std::invalid_argument("image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " but the encoder expects " +
                                std::to_string(config.image_side) + "x" +
                                std::to_string(config.image_side) + "; resize at ingestion");
  }
  std::vector<Tensor<T>> blocks;
  blocks.reserve(image.channels());
  for (std::size_t c = 0; c < image.channels(); ++c) {
    const auto patches =
        patchify_channel(image.channel(c), image.height, image.width, config.patch, c);
    const auto projected = project_patches(patch_matrix<T>(patches), tables);
    blocks.push_back(add_embeddings(projected, c, tables, config));
  }
  auto padded = pad_and_mask(blocks, config);
  TokenSequence<T> seq;
  seq.tokens = ops::concat_rows<T>({tables.cls, padded.tokens});
  seq.key_padding_mask.reserve(padded.key_padding_mask.size() + 1);
  seq.key_padding_mask.push_back(1);
  seq.key_padding_mask.insert(seq.key_padding_mask.end(), padded.key_padding_mask.begin(),
                              padded.key_padding_mask.end());
  seq.n_channels = padded.n_channels;
  return seq;
}

#define CHADA_INSTANTIATE_TOKENIZER(T)                                                         \
  template struct EmbeddingTables<T>;                                                          \
  template struct TokenSequence<T>;                                                            \
  template Tensor<T> patch_matrix<T>(std::span<const Patch>);                                  \
  template Tensor<T> project_patches(const Tensor<T>&, const EmbeddingTables<T>&);             \
  template Tensor<T> add_embeddings(const Tensor<T>&, std::size_t, const EmbeddingTables<T>&,  \
                                    const EncoderConfig&);                                     \
  template TokenSequence<T> pad_and_mask(const std::vector<Tensor<T>>&, const EncoderConfig&); \
  template TokenSequence<T> build_sequence(const MultiChannelImage&, const EmbeddingTables<T>&, \
                                           const EncoderConfig&);

CHADA_INSTANTIATE_TOKENIZER(float)
CHADA_INSTANTIATE_TOKENIZER(double)

}  // namespace chada
