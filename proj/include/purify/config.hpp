// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/evaluation.hpp"
#include "purify/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace purify {

// ---------------------------------------------------------------------------
// Config text
// ---------------------------------------------------------------------------

/// Reads the sectioned subset used by run configs:
///
///   # comment
///   [section]
///   key = 1.5            # numbers, true/false, "strings", [arrays of those]
///
/// into {"section": {"key": value}}. Keys before the first header land in the top level.
nlohmann::json parse_toml(const std::string& text);
nlohmann::json read_toml(const std::filesystem::path& path);

/// One right-hand side: number, bool, quoted string or array. Anything else is a bare string.
nlohmann::json parse_toml_value(const std::string& text);

std::string to_toml(const nlohmann::json& sections);

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

struct TargetSection {
  std::string arch = "cnn_a";
  TargetTrainConfig fit;
};

struct EvalSection {
  std::vector<std::string> attacks{"pgd_ce"};
  double epsilon = 0.031, alpha = 0.0075;
  int steps = 8;
  bool targeted = false;
  bool random_start = true;
  std::filesystem::path substitute;  // empty = white-box
  std::filesystem::path checkpoint;  // purifier; empty = undefended only
  Index limit = 0;
  std::uint64_t seed = 0;

  std::vector<AttackSpec> specs() const;
};

enum class Provenance { default_value, user };

struct ResolvedConfig {
  TrainConfig train;
  TargetSection model;
  EvalSection eval;
  std::map<std::string, Provenance> provenance;  // every dotted key

  Provenance source(const std::string& key) const;
  /// {"values": {section: {key: value}}, "provenance": {dotted key: "user"|"default"}}
  nlohmann::json to_json() const;
  /// Values only, as config text that resolves back to this configuration.
  std::string to_toml() const;
  void validate() const;
};

/// Every dotted key the config accepts, in a stable order.
const std::vector<std::string>& config_keys();

/// Closest accepted key by edit distance.
std::string nearest_key(const std::string& key);

/// Defaults, then the file's values, then the dotted-path overrides; flags win. Unknown keys
/// raise ConfigError naming the nearest accepted key.
ResolvedConfig resolve_config(const nlohmann::json& file_values,
                              const std::vector<std::pair<std::string, std::string>>& overrides = {});
ResolvedConfig resolve_config(const std::filesystem::path& file,
                              const std::vector<std::pair<std::string, std::string>>& overrides = {});

/// Reads back a to_json() document; provenance is restored as recorded.
ResolvedConfig config_from_json(const nlohmann::json& doc);

}  // namespace purify
