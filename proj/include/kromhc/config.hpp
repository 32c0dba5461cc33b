#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kromhc/model.hpp"

namespace kromhc {

struct LoadedConfig {
  RunConfig config;
  std::vector<std::string> warnings;
};

// Keys: scheme n factorization D C heads vocab_size seq_len batch_size steps
// learning_rate weight_decay seed shared_alpha sk_iters output_dir
// active_stream record_wall_ms.
std::span<const std::string_view> config_keys();

// Applies `key = value` lines (blank lines and `#` comments allowed) on top of
// `base`, then each `key=value` override, then validates. Every unknown key,
// malformed value and constraint violation is reported in one ConfigError.
LoadedConfig parse_config(std::string_view text, std::span<const std::string> overrides = {},
                          RunConfig base = {});
LoadedConfig load_config(const std::filesystem::path& path,
                         std::span<const std::string> overrides = {}, RunConfig base = {});

// Advisory notes for a valid config, such as a prime n collapsing KromHC to a
// single factor.
std::vector<std::string> config_warnings(const RunConfig& cfg);

}  // namespace kromhc
