// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "chimera/clip_adapter.hpp"
#include "chimera/model.hpp"

namespace chimera {

/// Adam moments keyed by parameter name.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::int64_t step = 0;
};

struct Checkpoint {
  ChimeraModel model;
  AdamState adam;
  std::int64_t iteration = 0;  // iterations completed
  std::string rng_state;       // textual engine state
  std::string fingerprint;     // frozen_fingerprint of the bundle used
  std::string config_snapshot;
};

/// Tensor archive with 64-bit tensors: every trainable, the batch-norm
/// buffers and the Adam moments.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Throws std::runtime_error when the checkpoint was trained against a
/// different bundle or does not fit its dimensions.
void check_compatible(const Checkpoint& ckpt, const ClipWeightBundle& bundle);

/// Named copies of every trainable tensor and buffer.
std::map<std::string, Tensor> model_tensors(const ChimeraModel& model);

}  // namespace chimera
