#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "tandem/training.hpp"

namespace tandem {

/// Everything a training run needs. Text form: one `key = value` per line,
/// `#` starts a comment, unknown keys are errors.
struct ExperimentConfig {
  TrainConfig train;
  DecoderConfig primary{258, 64, 4, 4, 256, 128};
  DecoderConfig secondary{258, 32, 2, 2, 128, 128};
  int gamma = 2;                  // tandem / deep tandem block length
  std::uint64_t seed = 1;         // parameter init
  int eval_windows = 64;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);

std::uint64_t fnv1a(std::string_view text);

/// FNV-1a of the formatted config.
std::uint64_t config_hash(const ExperimentConfig& config);

}  // namespace tandem
