#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dmrl {

struct ModelConfig;
struct TrainConfig;
struct SynthConfig;

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Reads a flat `key = value` file. Blank lines and `#` comments are skipped.
/// Throws ConfigError on lines without '=' and IoError on unreadable files.
KeyValues read_key_values(const std::filesystem::path& path);

/// Splits `key=value`; throws ConfigError when malformed.
std::pair<std::string, std::string> parse_override(const std::string& text);

/// Applies one setting to whichever config owns the key. Throws ConfigError
/// for unknown keys or unparsable values.
void apply_training_setting(ModelConfig& model, TrainConfig& train, const std::string& key, const std::string& value);
void apply_synth_setting(SynthConfig& synth, const std::string& key, const std::string& value);

/// Serializes every field as `key = value` lines (round-trips through
/// apply_training_setting).
std::string format_training_config(const ModelConfig& model, const TrainConfig& train);

} // namespace dmrl
