#include "chada/config.hpp"

namespace chada {

Pooling parse_pooling(const std::string& name) {
  if (name == "cls") return Pooling::Cls;
  if (name == "mean") return Pooling::Mean;
  throw std::invalid_argument("unknown pooling '" + name + "' (expected cls or mean)");
}

std::string to_string(Pooling pooling) { return pooling == Pooling::Cls ? "cls" : "mean"; }

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("encoder config: " + msg); };
  if (dim == 0 || heads == 0) fail("dim and heads must be positive");
  if (dim % heads != 0) {
    fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (patch == 0 || image_side == 0 || image_side % patch != 0) {
    fail("image side " + std::to_string(image_side) + " is not a multiple of patch " +
         std::to_string(patch));
  }
  if (max_channels == 0) fail("max_channels must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

}  // namespace chada
