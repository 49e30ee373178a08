// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chimera/checkpoint.hpp"
#include "chimera/config.hpp"
#include "chimera/dataset.hpp"
#include "chimera/model.hpp"

namespace chimera {

struct LossRecord {
  std::int64_t iteration = 0;
  double l_seg = 0.0, l_sgd = 0.0, l_sam = 0.0, total = 0.0;
  std::size_t k = 0;
};

std::string loss_log_header();
std::string format_loss_record(const LossRecord& r);

/// Frozen per-image inputs, computed once: mini-CLIP outputs and pseudo
/// masks depend only on the bundle and the images.
struct PreparedImage {
  Image image;
  LabelMap gt;  // global IDs
  ClipImageOutputs clip;
  PseudoMask pseudo;                // label resolution
  std::vector<int> feature_labels;  // pseudo mask at feature resolution, flattened
};

struct TrainContext {
  std::vector<PreparedImage> images;
  Tensor a_s, a_u;  // text embeddings of seen / unseen classes, split order
  ZSSplit split;
  const ClipWeightBundle* bundle = nullptr;
};

TrainContext prepare_training(const TrainConfig& cfg, const DatasetManifest& data,
                              const ClipWeightBundle& bundle);

struct StepResult {
  LossRecord record;
  std::map<std::string, Tensor> grads;  // summed over every use of a parameter
};

/// Forward and backward over one batch. Batch-norm running statistics in
/// `model` advance; parameters do not change.
StepResult training_step(ChimeraModel& model, const TrainContext& ctx, const TrainConfig& cfg,
                         std::span<const std::size_t> batch, std::int64_t iteration, Rng& rng);

/// Learning rate at iteration t: linear warmup, then constant.
double learning_rate(const TrainConfig& cfg, std::int64_t t);

/// One decoupled-weight-decay Adam step; decay applies to *.weight only.
void adam_update(ChimeraModel& model, AdamState& adam, const std::map<std::string, Tensor>& grads,
                 const TrainConfig& cfg, double lr);

/// Train-mode forwards over the dataset without parameter updates, so that
/// batch-norm running statistics exist.
void calibrate_batch_norm(ChimeraModel& model, const TrainContext& ctx, std::size_t batch_size);

/// Randomly initialized model with calibrated statistics, iteration 0.
Checkpoint initial_checkpoint(const TrainConfig& cfg, const DatasetManifest& data,
                              const ClipWeightBundle& bundle);

struct TrainOptions {
  std::function<void(const LossRecord&)> on_iteration;
  /// Continue from this checkpoint instead of a fresh initialization.
  const Checkpoint* resume = nullptr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

/// Runs cfg.iterations iterations. When cfg.out_dir is set, appends to
/// out_dir/loss_log.csv, saves out_dir/checkpoints/iter_NNNNNN at the
/// configured cadence and the final state to out_dir/checkpoint.
/// Throws NumericError on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& data,
                  const ClipWeightBundle& bundle, const TrainOptions& opts = {});

}  // namespace chimera
