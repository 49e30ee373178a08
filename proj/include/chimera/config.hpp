// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "chimera/backbone.hpp"
#include "chimera/pseudo_supervision.hpp"
#include "chimera/selective_distillation.hpp"
#include "chimera/semantic_head.hpp"
#include "chimera/zss_objective.hpp"

namespace chimera {

struct TrainConfig {
  std::filesystem::path data_root;
  std::filesystem::path clip_bundle;
  std::filesystem::path out_dir;

  std::int64_t iterations = 500;
  std::size_t batch_size = 16;
  double lr = 6e-5;
  double weight_decay = 1e-2;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  ZSMode mode = ZSMode::kInductive;

  BackboneConfig backbone;
  CSHConfig csh;

  DecaySchedule sgd_schedule;
  double sgd_tau = kDefaultTau;
  bool sgd_noise = true;

  double sam_tau_f = 0.07;
  double sam_tau_c = 0.01;
  double lambda_sam = 0.5;

  FocalConfig focal;
  PseudoMaskConfig pseudo;

  double infer_gamma = 0.5;
};

/// Parses `key = value` lines ('#' starts a comment). Unknown or repeated
/// keys are errors. Relative paths resolve against `base_dir`.
TrainConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& file);

/// Throws std::invalid_argument on out-of-range values.
void validate_config(const TrainConfig& cfg);

/// Every key with its current value, one per line, in a stable order.
std::string config_to_text(const TrainConfig& cfg);

/// Names of all accepted keys.
std::vector<std::string> config_keys();

}  // namespace chimera
