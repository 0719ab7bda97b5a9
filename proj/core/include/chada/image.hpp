#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace chada {

/// H x W image with a variable number of channels, stored channel-major.
struct MultiChannelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // channels * height * width
  std::vector<std::string> channel_names;

  MultiChannelImage() = default;
  MultiChannelImage(std::size_t channels, std::size_t height, std::size_t width, float fill = 0.0f);

  std::size_t channels() const { return height * width == 0 ? 0 : pixels.size() / (height * width); }
  std::size_t plane_size() const { return height * width; }

  std::span<float> channel(std::size_t c);
  std::span<const float> channel(std::size_t c) const;
  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }

  /// Copy holding only the listed channels, in the listed order.
  MultiChannelImage select_channels(std::span<const std::size_t> which) const;

  /// Throws std::invalid_argument unless 1 <= channels <= max_channels, the
  /// pixel buffer matches the extents, and every value is finite.
  void validate(std::size_t max_channels) const;
};

/// Per-channel bilinear resampling to side x side (align_corners = false).
MultiChannelImage resize_bilinear(const MultiChannelImage& image, std::size_t side);

/// Per-channel min-max scaling to [0, 1]; constant channels become 0.
void normalize_minmax(MultiChannelImage& image);

/// Writes one [0, 1] plane as an 8-bit binary PGM (P5).
void write_pgm(const std::string& path, std::span<const float> plane, std::size_t height,
               std::size_t width);

}  // namespace chada
