#include "chada/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace chada {

MultiChannelImage::MultiChannelImage(std::size_t channels, std::size_t height, std::size_t width,
                                     float fill)
    : height(height), width(width), pixels(channels * height * width, fill),
      channel_names(channels) {}

std::span<float> MultiChannelImage::channel(std::size_t c) {
  if (c >= channels()) throw std::out_of_range("channel index " + std::to_string(c));
  return std::span<float>(pixels).subspan(c * plane_size(), plane_size());
}

std::span<const float> MultiChannelImage::channel(std::size_t c) const {
  if (c >= channels()) throw std::out_of_range("channel index " + std::to_string(c));
  return std::span<const float>(pixels).subspan(c * plane_size(), plane_size());
}

MultiChannelImage MultiChannelImage::select_channels(std::span<const std::size_t> which) const {
  MultiChannelImage out(which.size(), height, width);
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto src = channel(which[i]);
    std::copy(src.begin(), src.end(), out.channel(i).begin());
    if (which[i] < channel_names.size()) out.channel_names[i] = channel_names[which[i]];
  }
  return out;
}

void MultiChannelImage::validate(std::size_t max_channels) const {
  if (height == 0 || width == 0) throw std::invalid_argument("image has zero extent");
  if (pixels.size() % plane_size() != 0) {
    throw std::invalid_argument("pixel buffer is not a whole number of channels");
  }
  const std::size_t n = channels();
  if (n < 1 || n > max_channels) {
    throw std::invalid_argument("image has " + std::to_string(n) + " channels; supported range is 1.." +
                                std::to_string(max_channels));
  }
  for (float v : pixels) {
    if (!std::isfinite(v)) throw std::invalid_argument("image contains a non-finite pixel");
  }
}

MultiChannelImage resize_bilinear(const MultiChannelImage& image, std::size_t side) {
  if (side == 0) throw std::invalid_argument("resize_bilinear: side must be positive");
  const std::size_t n = image.channels(), h = image.height, w = image.width;
  MultiChannelImage out(n, side, side);
  out.channel_names = image.channel_names;
  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  auto taps = [side](std::size_t in) {
    std::vector<Tap> t(side);
    const double scale = static_cast<double>(in) / static_cast<double>(side);
    for (std::size_t i = 0; i < side; ++i) {
      const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0,
                                    static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      t[i] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(h), tx = taps(w);
  for (std::size_t c = 0; c < n; ++c) {
    const auto src = image.channel(c);
    auto dst = out.channel(c);
    for (std::size_t y = 0; y < side; ++y) {
      const float* r0 = src.data() + ty[y].lo * w;
      const float* r1 = src.data() + ty[y].hi * w;
      for (std::size_t x = 0; x < side; ++x) {
        const float fx = tx[x].frac, fy = ty[y].frac;
        const float top = r0[tx[x].lo] + fx * (r0[tx[x].hi] - r0[tx[x].lo]);
        const float bottom = r1[tx[x].lo] + fx * (r1[tx[x].hi] - r1[tx[x].lo]);
        dst[y * side + x] = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

void normalize_minmax(MultiChannelImage& image) {
  for (std::size_t c = 0; c < image.channels(); ++c) {
    auto plane = image.channel(c);
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    const float min = *lo, range = *hi - *lo;
    for (auto& v : plane) v = range > 0.0f ? (v - min) / range : 0.0f;
  }
}

void write_pgm(const std::string& path, std::span<const float> plane, std::size_t height,
               std::size_t width) {
  if (plane.size() != height * width) throw std::invalid_argument("write_pgm: plane size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  for (float v : plane) {
    const float clamped = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0f))));
  }
}

}  // namespace chada
