#pragma once

#include <random>

#include "chada/image.hpp"
#include "chada/random.hpp"

namespace chada::testing {

inline MultiChannelImage random_image(std::size_t channels, std::size_t side, Rng& rng) {
  MultiChannelImage img(channels, side, side);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

}  // namespace chada::testing
