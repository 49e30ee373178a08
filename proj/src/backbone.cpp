// SPDX-License-Identifier: Apache-2.0
#include "chimera/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace chimera {

void validate_backbone_config(const BackboneConfig& cfg) {
  if (cfg.stride != 1 && cfg.stride != 2 && cfg.stride != 4) {
    throw std::invalid_argument("backbone stride must be 1, 2 or 4, got " +
                                std::to_string(cfg.stride));
  }
  if (cfg.channels < 4 || cfg.channels % 4 != 0) {
    throw std::invalid_argument("backbone channels must be a positive multiple of 4, got " +
                                std::to_string(cfg.channels));
  }
}

std::array<std::size_t, kBackboneStages> stage_strides(const BackboneConfig& cfg) {
  switch (cfg.stride) {
    case 1: return {1, 1, 1};
    case 2: return {1, 1, 2};
    default: return {1, 2, 2};
  }
}

std::array<std::size_t, kBackboneStages> stage_channels(const BackboneConfig& cfg) {
  return {cfg.channels / 4, cfg.channels / 2, cfg.channels};
}

BackboneParams init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  validate_backbone_config(cfg);
  std::mt19937_64 rng(seed);
  BackboneParams p;
  p.config = cfg;
  const auto widths = stage_channels(cfg);
  std::size_t c_in = 3;
  for (std::size_t i = 0; i < kBackboneStages; ++i) {
    const std::size_t fan_in = 9 * c_in;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    p.weights[i] = Tensor({fan_in, widths[i]});
    for (double& v : p.weights[i].storage()) v = dist(rng);
    p.biases[i] = Tensor::zeros({widths[i]});
    c_in = widths[i];
  }
  return p;
}

std::vector<FeatureVar> backbone_forward(const Image& image, const BackboneParams& params,
                                         ParamBinder& bind) {
  validate_backbone_config(params.config);
  if (image.dim() != 3 || image.size(2) != 3) {
    throw std::invalid_argument("backbone: expected an HxWx3 image, got " +
                                shape_to_string(image.shape()));
  }
  const std::size_t h = image.size(0), w = image.size(1);
  if (h % params.config.stride != 0 || w % params.config.stride != 0) {
    throw std::invalid_argument("backbone: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by stride " + std::to_string(params.config.stride));
  }
  ag::Tape& tape = bind.tape();
  FeatureVar x{tape.constant(image.reshaped({h * w, 3})), h, w};
  std::vector<FeatureVar> stages;
  const auto strides = stage_strides(params.config);
  for (std::size_t i = 0; i < kBackboneStages; ++i) {
    const ag::Var wv = bind("backbone.stage" + std::to_string(i) + ".weight", params.weights[i]);
    const ag::Var bv = bind("backbone.stage" + std::to_string(i) + ".bias", params.biases[i]);
    const ag::Var y = ag::gelu(ag::conv3x3(x.rows, x.height, x.width, wv, bv, strides[i]));
    x = FeatureVar{y, (x.height - 1) / strides[i] + 1, (x.width - 1) / strides[i] + 1};
    stages.push_back(x);
  }
  return stages;
}

DenseFeatureMap to_feature_map(const FeatureVar& f, std::size_t stride) {
  return DenseFeatureMap{f.rows.value().reshaped({f.height, f.width, f.rows.cols()}), stride};
}

DenseFeatureMap extract_features(const Image& image, const BackboneParams& params) {
  ag::Tape tape;
  ParamBinder bind(tape, false);
  const auto stages = backbone_forward(image, params, bind);
  return to_feature_map(stages.back(), params.config.stride);
}

}  // namespace chimera
