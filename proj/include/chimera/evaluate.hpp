// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "chimera/checkpoint.hpp"
#include "chimera/dataset.hpp"
#include "chimera/zss_objective.hpp"

namespace chimera {

struct EvalResult {
  MetricsReport report;
  std::vector<LabelMap> predictions;  // label resolution, global IDs
  std::size_t unseen_pixels = 0;      // predicted pixels carrying an unseen class
};

/// Eval-mode f_c for every image of the dataset.
std::vector<Tensor> dataset_embeddings(const Checkpoint& ckpt, const DatasetManifest& data,
                                       const ClipWeightBundle& bundle);

/// Calibrated predictions from precomputed embeddings, scored against the
/// full ground truth.
EvalResult evaluate_embeddings(const std::vector<Tensor>& f_c, const DatasetManifest& data,
                               const ClipWeightBundle& bundle, double gamma);

EvalResult evaluate(const Checkpoint& ckpt, const DatasetManifest& data,
                    const ClipWeightBundle& bundle, double gamma);

std::size_t count_unseen_pixels(const std::vector<LabelMap>& preds, const ZSSplit& split);

}  // namespace chimera
