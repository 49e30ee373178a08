// SPDX-License-Identifier: Apache-2.0
#include "chimera/model.hpp"

#include "chimera/selective_distillation.hpp"

namespace chimera {

ChimeraModel init_model(const BackboneConfig& backbone, const CSHConfig& csh, std::size_t d_vis,
                        std::uint64_t seed) {
  Rng rng(seed);
  const std::uint64_t backbone_seed = rng();
  const std::uint64_t csh_seed = rng();
  ChimeraModel m;
  m.backbone = init_backbone(backbone, backbone_seed);
  m.csh = init_csh(stage_channels(backbone).back(), d_vis, csh, csh_seed);
  return m;
}

ModelOutputs model_forward(const ChimeraModel& model, const ClipWeightBundle& bundle,
                           const Image& image) {
  ag::Tape tape;
  ParamBinder bind(tape, false);
  const auto stages = backbone_forward(image, model.backbone, bind);
  const auto strides = stage_strides(model.backbone.config);
  ModelOutputs out;
  std::size_t stride = 1;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stride *= strides[i];
    out.stages.push_back(to_feature_map(stages[i], stride));
  }
  CSHParams csh = model.csh;
  out.csh = csh_forward(out.stages.back(), csh, bundle, Mode::kEval);
  return out;
}

Tensor dense_embeddings(const ChimeraModel& model, const ClipWeightBundle& bundle,
                        const Image& image) {
  CSHParams csh = model.csh;
  return csh_forward(extract_features(image, model.backbone), csh, bundle, Mode::kEval).f_c;
}

}  // namespace chimera
