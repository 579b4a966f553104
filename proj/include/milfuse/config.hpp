#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace milfuse {

/// Every tunable knob, with the documented defaults. Config-file keys and
/// CLI flag names both map 1:1 onto these fields.
struct CliConfig {
  std::uint64_t seed = 7;

  // dims
  std::size_t classes = 4;
  std::size_t dim = 1024;
  std::size_t hidden = 512;
  std::size_t attn = 256;
  std::size_t pooled_dim = 32;

  // optimizer
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // loss
  double c1 = 0.7;
  double c2 = 0.3;
  double fused_c2 = 0.0;
  double tau = 1.0;
  std::size_t k_sample = 8;
  std::string patch_reduce = "mean";  // mean | sum

  // training schedule
  std::size_t min_epochs = 50;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double min_delta = 1e-5;

  // cross-validation
  std::size_t folds = 5;
  std::size_t jobs = 1;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;

  // synthetic generator
  std::size_t per_class = 50;
  std::size_t bag_min = 8;
  std::size_t bag_max = 24;
  double signal_fraction = 0.25;
  double signal_strength = 12.0;
  double noise_scale = 1.0;

  bool l2_normalize = false;
};

/// Applies `key = value` lines (# comments, blank lines allowed) onto cfg.
/// Unknown keys and unparsable values are rejected.
void apply_config_file(CliConfig& cfg, const std::filesystem::path& path);

/// One key=value line per knob, sorted by key; written as
/// effective_config.txt next to command outputs.
std::string render_config(const CliConfig& cfg);

/// Range/consistency checks shared by all commands.
void validate_config(const CliConfig& cfg);

}  // namespace milfuse
