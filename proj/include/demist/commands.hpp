#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "demist/config.hpp"

namespace demist {

/// Command-line level settings. Flags override entries of the config file.
struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::filesystem::path> out;
  std::vector<std::string> overrides;  // "key=value"
};

KeyValueConfig resolve_config(const CommandOptions& options);

/// Each command validates its keys, writes `resolved.cfg` into the output
/// directory, and throws on any error.
void cmd_synth(const KeyValueConfig& config, std::ostream& log);
void cmd_train_classifier(const KeyValueConfig& config, std::ostream& log);
void cmd_train(const KeyValueConfig& config, std::ostream& log);
void cmd_restore(const KeyValueConfig& config, std::ostream& log);
void cmd_eval(const KeyValueConfig& config, std::ostream& log);
void cmd_cam(const KeyValueConfig& config, std::ostream& log);

const std::vector<std::string>& command_names();

/// Dispatches by name; unknown names throw.
void run_command(const std::string& name, const KeyValueConfig& config, std::ostream& log);

}  // namespace demist
