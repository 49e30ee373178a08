// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "chimera/backbone.hpp"
#include "chimera/clip_adapter.hpp"
#include "chimera/semantic_head.hpp"

namespace chimera {

/// Everything that trains: the backbone and the semantic head.
struct ChimeraModel {
  BackboneParams backbone;
  CSHParams csh;

  template <typename F>
  void for_each_trainable(F&& f) {
    backbone.for_each(f);
    csh.for_each_trainable(f);
  }
  template <typename F>
  void for_each_buffer(F&& f) {
    csh.for_each_buffer(f);
  }
};

ChimeraModel init_model(const BackboneConfig& backbone, const CSHConfig& csh, std::size_t d_vis,
                        std::uint64_t seed);

/// Eval-mode activations for one image.
struct ModelOutputs {
  std::vector<DenseFeatureMap> stages;  // backbone stage outputs
  CSHTrace csh;                         // f_c is [H', W', d_emb]
};

ModelOutputs model_forward(const ChimeraModel& model, const ClipWeightBundle& bundle,
                           const Image& image);

/// Dense joint-space embeddings f_c [H', W', d_emb] in eval mode.
Tensor dense_embeddings(const ChimeraModel& model, const ClipWeightBundle& bundle,
                        const Image& image);

}  // namespace chimera
