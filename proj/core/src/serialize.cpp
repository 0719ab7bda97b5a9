#include "chada/serialize.hpp"

#include <algorithm>
#include <stdexcept>

namespace chada {
namespace {

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(context + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace

void require_known_keys(const nlohmann::json& object, std::initializer_list<const char*> allowed,
                        const std::string& context) {
  if (!object.is_object()) throw std::invalid_argument(context + ": expected a JSON object");
  for (const auto& [key, value] : object.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw std::invalid_argument(context + ": unknown key '" + key + "'");
    }
  }
}

nlohmann::ordered_json to_json(const EncoderConfig& c) {
  return {{"dim", c.dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"patch", c.patch},
          {"max_channels", c.max_channels},
          {"image_side", c.image_side},
          {"pooling", to_string(c.pooling)},
          {"channel_embedding", c.channel_embedding},
          {"norm_eps", c.norm_eps}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  const std::string ctx = "encoder config";
  require_known_keys(j, {"dim", "depth", "heads", "mlp_ratio", "patch", "max_channels", "image_side",
                         "pooling", "channel_embedding", "norm_eps"},
                     ctx);
  EncoderConfig c;
  read(j, "dim", c.dim, ctx);
  read(j, "depth", c.depth, ctx);
  read(j, "heads", c.heads, ctx);
  read(j, "mlp_ratio", c.mlp_ratio, ctx);
  read(j, "patch", c.patch, ctx);
  read(j, "max_channels", c.max_channels, ctx);
  read(j, "image_side", c.image_side, ctx);
  std::string pooling = to_string(c.pooling);
  read(j, "pooling", pooling, ctx);
  c.pooling = parse_pooling(pooling);
  read(j, "channel_embedding", c.channel_embedding, ctx);
  read(j, "norm_eps", c.norm_eps, ctx);
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const DinoConfig& c) {
  const auto& a = c.augmentation;
  return {{"head_hidden", c.head_hidden},
          {"head_bottleneck", c.head_bottleneck},
          {"out_dim", c.out_dim},
          {"student_temp", c.student_temp},
          {"teacher_temp", c.teacher_temp},
          {"center_momentum", c.center_momentum},
          {"teacher_momentum_start", c.teacher_momentum_start},
          {"teacher_momentum_end", c.teacher_momentum_end},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"final_lr", c.final_lr},
          {"weight_decay", c.weight_decay},
          {"clip_grad", c.clip_grad},
          {"seed", c.seed},
          {"augmentation",
           {{"min_crop_scale", a.min_crop_scale},
            {"max_crop_scale", a.max_crop_scale},
            {"horizontal_flip", a.horizontal_flip},
            {"vertical_flip", a.vertical_flip},
            {"intensity_jitter", a.intensity_jitter}}}};
}

DinoConfig dino_config_from_json(const nlohmann::json& j) {
  const std::string ctx = "dino config";
  require_known_keys(j, {"head_hidden", "head_bottleneck", "out_dim", "student_temp", "teacher_temp", "center_momentum",
                         "teacher_momentum_start", "teacher_momentum_end", "steps", "batch_size",
                         "base_lr", "final_lr", "weight_decay", "clip_grad", "seed", "augmentation"},
                     ctx);
  DinoConfig c;
  read(j, "head_hidden", c.head_hidden, ctx);
  read(j, "head_bottleneck", c.head_bottleneck, ctx);
  read(j, "out_dim", c.out_dim, ctx);
  read(j, "student_temp", c.student_temp, ctx);
  read(j, "teacher_temp", c.teacher_temp, ctx);
  read(j, "center_momentum", c.center_momentum, ctx);
  read(j, "teacher_momentum_start", c.teacher_momentum_start, ctx);
  read(j, "teacher_momentum_end", c.teacher_momentum_end, ctx);
  read(j, "steps", c.steps, ctx);
  read(j, "batch_size", c.batch_size, ctx);
  read(j, "base_lr", c.base_lr, ctx);
  read(j, "final_lr", c.final_lr, ctx);
  read(j, "weight_decay", c.weight_decay, ctx);
  read(j, "clip_grad", c.clip_grad, ctx);
  read(j, "seed", c.seed, ctx);
  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    const std::string actx = ctx + ".augmentation";
    require_known_keys(a, {"min_crop_scale", "max_crop_scale", "horizontal_flip", "vertical_flip",
                           "intensity_jitter"},
                       actx);
    read(a, "min_crop_scale", c.augmentation.min_crop_scale, actx);
    read(a, "max_crop_scale", c.augmentation.max_crop_scale, actx);
    read(a, "horizontal_flip", c.augmentation.horizontal_flip, actx);
    read(a, "vertical_flip", c.augmentation.vertical_flip, actx);
    read(a, "intensity_jitter", c.augmentation.intensity_jitter, actx);
  }
  c.validate();
  return c;
}

}  // namespace chada
