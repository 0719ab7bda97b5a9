#pragma once

#include <nlohmann/json.hpp>

#include "chada/config.hpp"
#include "chada/ssl.hpp"

namespace chada {

// Strict JSON mapping of the configuration structs. Parsing starts from the
// defaults, overrides only the keys present and throws std::invalid_argument
// naming the first unknown or mistyped key.

nlohmann::ordered_json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& json);

nlohmann::ordered_json to_json(const DinoConfig& config);
DinoConfig dino_config_from_json(const nlohmann::json& json);

/// Throws std::invalid_argument if `object` has a key outside `allowed`.
void require_known_keys(const nlohmann::json& object, std::initializer_list<const char*> allowed,
                        const std::string& context);

}  // namespace chada
