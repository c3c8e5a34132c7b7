#pragma once

// JSON forms of every configuration type. Readers are strict: unknown keys
// and wrongly typed values raise ConfigError naming the offending path.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "optolab/clamps.hpp"
#include "optolab/taskgen.hpp"
#include "optolab/toy_model.hpp"
#include "optolab/transformer.hpp"

namespace optolab {

using Json = nlohmann::ordered_json;

Json to_json(const WorldConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const AdamConfig& c);
Json to_json(const ClampSpec& c);
Json to_json(const ToyConfig& c);

void from_json(const Json& j, WorldConfig& c, const std::string& where = "world");
void from_json(const Json& j, ModelConfig& c, const std::string& where = "model");
void from_json(const Json& j, AdamConfig& c, const std::string& where = "adam");
void from_json(const Json& j, ClampSpec& c, const std::string& where = "clamp");
void from_json(const Json& j, ToyConfig& c, const std::string& where = "toy");

/// Sets a dotted key ("world.labels=15"). The value is parsed as JSON when
/// possible and taken as a string otherwise. Intermediate objects must exist.
void apply_override(Json& j, const std::string& assignment);

/// 64-bit FNV-1a of the compact dump, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace optolab
