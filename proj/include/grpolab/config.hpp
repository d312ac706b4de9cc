#pragma once

/**
 * Plain-text run configuration and experiment presets.
 *
 * A config file is a list of `key = value` lines. `#` starts a comment, blank lines are ignored.
 * Every RunConfig field has a key (see config_keys()); unset keys keep their defaults. A file
 * names either a `method` (single run) or a `preset` (a family of runs sharing data and eval seeds).
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grpolab/trainer.hpp"

namespace grpolab {

struct ConfigKey {
  const char* name;
  const char* doc;
};

/// All keys in dump order.
std::span<const ConfigKey> config_keys();

struct ConfigFile {
  RunConfig config;
  std::optional<std::string> preset;
};

/**
 * Parses and validates a config. Errors are ConfigError with "origin:line: message", or
 * "origin: message" for problems not tied to a line (a missing required key).
 */
ConfigFile parse_config(std::string_view text, std::string_view origin = "config");

/// Reads `path` and parses it; an unreadable file is a ConfigError.
ConfigFile load_config(const std::string& path);

/// Every key with its current value, one per line, in config_keys() order. Parses back to `config`.
std::string dump_config(const RunConfig& config);

/// Value of one key rendered as it would appear in a dump.
std::string config_value(const RunConfig& config, std::string_view key);

/// Sets one key from its text form. Throws ConfigError on unknown keys or malformed values.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

enum class ComparisonAxis : std::uint8_t { kMethod = 0, kSupervision, kIteration };

const char* to_string(ComparisonAxis a);

struct ExperimentPreset {
  std::string name;
  ComparisonAxis axis = ComparisonAxis::kMethod;
  std::vector<RunConfig> runs;  ///< run names are unique within the preset
};

/// Names accepted by expand_preset.
std::span<const char* const> preset_names();

/**
 * Expands a named preset around `base`. Every run keeps base's task seed, eval seed and data sizes.
 *   paradigm-comparison  one run per method (SFT, RFT, Online RFT, DPO, PPO, GRPO)
 *   supervision          GRPO with outcome and with process supervision
 *   iterative            GRPO with three outer iterations of reward-model retraining
 *   maj-pass             continued SFT and GRPO, evaluated at K in {1, 4, 16} and temperature 0.7
 */
ExperimentPreset expand_preset(std::string_view name, const RunConfig& base);

}  // namespace grpolab
