// SPDX-License-Identifier: Apache-2.0
#pragma once

// Semantic head: trainable MLP -> frozen VEncoder block(s) -> trainable
// normalization -> residual -> frozen visual projection.

#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "chimera/autograd.hpp"
#include "chimera/backbone.hpp"
#include "chimera/clip_adapter.hpp"
#include "chimera/params.hpp"
#include "chimera/tensor.hpp"

namespace chimera {

/// Normalization applied to the VEncoder output. kBatch is the reference
/// design; the others exist for ablations.
enum class NormKind { kBatch, kGroup, kLayerFrozen, kLayerLearn, kNone };

NormKind parse_norm_kind(const std::string& s);
std::string to_string(NormKind k);
bool norm_has_affine(NormKind k);

enum class Mode { kTrain, kEval };

struct CSHConfig {
  NormKind norm = NormKind::kBatch;
  std::size_t vencoder_blocks = 1;  // 0..3
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::size_t gn_groups = 8;
};

struct CSHParams {
  CSHConfig config;
  // proj_mlp: linear C->d_vis, GELU, linear d_vis->d_vis
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  // Affine of the normalization stage (bn / gn / ln-learn).
  Tensor bn_scale, bn_shift;
  // Batch statistics, updated in train mode only.
  Tensor bn_running_mean, bn_running_var;
  std::uint64_t bn_batches_tracked = 0;

  std::size_t in_channels() const { return mlp_w1.rows(); }
  std::size_t d_vis() const { return mlp_w2.cols(); }

  template <typename F>
  void for_each_trainable(F&& f) {
    f("csh.mlp.fc1.weight", mlp_w1);
    f("csh.mlp.fc1.bias", mlp_b1);
    f("csh.mlp.fc2.weight", mlp_w2);
    f("csh.mlp.fc2.bias", mlp_b2);
    if (norm_has_affine(config.norm)) {
      f("csh.norm.scale", bn_scale);
      f("csh.norm.shift", bn_shift);
    }
  }
  template <typename F>
  void for_each_buffer(F&& f) {
    if (config.norm == NormKind::kBatch) {
      f("csh.norm.running_mean", bn_running_mean);
      f("csh.norm.running_var", bn_running_var);
    }
  }
};

/// Intermediate states, each [H', W', d] (f_c is [H', W', d_emb]).
struct CSHTrace {
  Tensor f_p, f_v_prime, f_v, f_bn, f_res, f_c;
};

/// Tape counterpart of CSHTrace over flattened rows [n, d].
struct CSHVars {
  ag::Var f_p, f_v_prime, f_v, f_bn, f_res, f_c;
};

CSHParams init_csh(std::size_t in_channels, std::size_t d_vis, const CSHConfig& config,
                   std::uint64_t seed);

/// f_v' = Value(LN1(x)) + x; f_v = FFN(LN2(f_v')) + f_v', row by row.
std::pair<ag::Var, ag::Var> vencoder_forward(const ag::Var& f_p, const VEncoderWeights& w);
std::pair<Tensor, Tensor> vencoder_forward(const Tensor& f_p, const VEncoderWeights& w);

/// Forward over rows gathered from one or more images. `segment_rows` gives
/// the row count of each image (used by group norm). In train mode with
/// batch norm the running statistics in `params` are updated.
CSHVars csh_forward(const ag::Var& features, std::span<const std::size_t> segment_rows,
                    CSHParams& params, const ClipWeightBundle& bundle, Mode mode,
                    ParamBinder& bind);

CSHTrace csh_forward(const DenseFeatureMap& f, CSHParams& params, const ClipWeightBundle& bundle,
                     Mode mode);

/// Digest over every frozen bundle tensor.
std::string frozen_fingerprint(const ClipWeightBundle& bundle);

}  // namespace chimera
