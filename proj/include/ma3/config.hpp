#pragma once

// Flat `key = value` configuration text for TrainConfig. Blank lines and
// lines starting with '#' are ignored; unknown keys are errors.

#include <string>
#include <vector>

#include "ma3/trainer.hpp"

namespace ma3 {

/// Sets one field from its text form. Throws ConfigError naming the key for
/// unknown keys and unparsable values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Applies every `key = value` line of `text` in order.
void apply_config_text(TrainConfig& cfg, const std::string& text);

/// Reads and applies a config file; throws IoError when unreadable.
void apply_config_file(TrainConfig& cfg, const std::string& path);

/// Canonical text form: every key in a fixed order, doubles round-trip exactly.
std::string config_to_text(const TrainConfig& cfg);

/// All recognized keys in canonical order.
std::vector<std::string> config_keys();

/// Git-style blob hash (SHA-1 of "blob <len>\0" + text), hex encoded.
std::string git_blob_hash(const std::string& text);

}  // namespace ma3
