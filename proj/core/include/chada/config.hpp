#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace chada {

enum class Pooling { Cls, Mean };

Pooling parse_pooling(const std::string& name);
std::string to_string(Pooling pooling);

/// Encoder hyperparameters. Defaults are the 192-wide, 10-channel, 16-pixel
/// patch model on 224 x 224 inputs.
struct EncoderConfig {
  std::size_t dim = 192;
  std::size_t depth = 12;
  std::size_t heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 16;
  std::size_t max_channels = 10;
  std::size_t image_side = 224;
  Pooling pooling = Pooling::Cls;
  /// false for the single-channel baseline ViT, which has no channel table.
  bool channel_embedding = true;
  double norm_eps = 1e-6;

  std::size_t grid() const { return image_side / patch; }
  /// m: patches per channel.
  std::size_t patches_per_channel() const { return grid() * grid(); }
  /// 1 + N_max * m.
  std::size_t sequence_length() const { return 1 + max_channels * patches_per_channel(); }
  std::size_t head_dim() const { return dim / heads; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

}  // namespace chada
