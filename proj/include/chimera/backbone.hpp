// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "chimera/autograd.hpp"
#include "chimera/clip_adapter.hpp"
#include "chimera/params.hpp"
#include "chimera/tensor.hpp"

namespace chimera {

struct BackboneConfig {
  std::size_t channels = 64;  // output width C; stages use C/4, C/2, C
  std::size_t stride = 4;     // 1, 2 or 4
};

inline constexpr std::size_t kBackboneStages = 3;

/// Three 3x3 convolution stages, each followed by GELU. With stride 4 the
/// last two stages downsample by 2.
struct BackboneParams {
  BackboneConfig config;
  std::array<Tensor, kBackboneStages> weights;  // [9*c_in, c_out]
  std::array<Tensor, kBackboneStages> biases;   // [c_out]

  template <typename F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < kBackboneStages; ++i) {
      f("backbone.stage" + std::to_string(i) + ".weight", weights[i]);
      f("backbone.stage" + std::to_string(i) + ".bias", biases[i]);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<BackboneParams*>(this)->for_each(
        [&](const std::string& n, Tensor& t) { f(n, static_cast<const Tensor&>(t)); });
  }
};

/// Spatial feature map: data is [H', W', C].
struct DenseFeatureMap {
  Tensor data;
  std::size_t stride = 1;
  std::size_t height() const { return data.size(0); }
  std::size_t width() const { return data.size(1); }
  std::size_t channels() const { return data.size(2); }
};

/// A feature map on the tape, flattened to [height*width, C].
struct FeatureVar {
  ag::Var rows;
  std::size_t height = 0, width = 0;
};

void validate_backbone_config(const BackboneConfig& cfg);
std::array<std::size_t, kBackboneStages> stage_strides(const BackboneConfig& cfg);
std::array<std::size_t, kBackboneStages> stage_channels(const BackboneConfig& cfg);

/// He-normal weights, zero biases.
BackboneParams init_backbone(const BackboneConfig& cfg, std::uint64_t seed);

/// Outputs of every stage; the last one is the dense feature map.
std::vector<FeatureVar> backbone_forward(const Image& image, const BackboneParams& params,
                                         ParamBinder& bind);

DenseFeatureMap extract_features(const Image& image, const BackboneParams& params);

DenseFeatureMap to_feature_map(const FeatureVar& f, std::size_t stride);

}  // namespace chimera
