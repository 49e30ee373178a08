// SPDX-License-Identifier: Apache-2.0
#include "chimera/semantic_head.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace chimera {

NormKind parse_norm_kind(const std::string& s) {
  if (s == "bn") return NormKind::kBatch;
  if (s == "gn") return NormKind::kGroup;
  if (s == "ln-frozen") return NormKind::kLayerFrozen;
  if (s == "ln-learn") return NormKind::kLayerLearn;
  if (s == "none") return NormKind::kNone;
  throw std::invalid_argument("unknown normalization '" + s +
                              "' (expected bn, gn, ln-frozen, ln-learn or none)");
}

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::kBatch: return "bn";
    case NormKind::kGroup: return "gn";
    case NormKind::kLayerFrozen: return "ln-frozen";
    case NormKind::kLayerLearn: return "ln-learn";
    case NormKind::kNone: return "none";
  }
  return "?";
}

bool norm_has_affine(NormKind k) {
  return k == NormKind::kBatch || k == NormKind::kGroup || k == NormKind::kLayerLearn;
}

CSHParams init_csh(std::size_t in_channels, std::size_t d_vis, const CSHConfig& config,
                   std::uint64_t seed) {
  if (config.vencoder_blocks > kMaxVEncoders) {
    throw std::invalid_argument("vencoder_blocks must be in [0, " +
                                std::to_string(kMaxVEncoders) + "]");
  }
  std::mt19937_64 rng(seed);
  auto normal = [&](Shape shape, double fan_in) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = dist(rng);
    return t;
  };
  CSHParams p;
  p.config = config;
  p.mlp_w1 = normal({in_channels, d_vis}, static_cast<double>(in_channels));
  p.mlp_b1 = Tensor::zeros({d_vis});
  p.mlp_w2 = normal({d_vis, d_vis}, static_cast<double>(d_vis));
  p.mlp_b2 = Tensor::zeros({d_vis});
  p.bn_scale = Tensor::full({d_vis}, 1.0);
  p.bn_shift = Tensor::zeros({d_vis});
  p.bn_running_mean = Tensor::zeros({d_vis});
  p.bn_running_var = Tensor::full({d_vis}, 1.0);
  return p;
}

std::pair<ag::Var, ag::Var> vencoder_forward(const ag::Var& f_p, const VEncoderWeights& w) {
  const std::size_t d = w.value_weight.rows();
  if (f_p.cols() != d) {
    throw std::invalid_argument("vencoder: input width " + std::to_string(f_p.cols()) +
                                " != d_vis " + std::to_string(d));
  }
  ag::Tape& tape = f_p.tape();
  auto c = [&](const Tensor& t) { return tape.constant(t); };
  const ag::Var normed1 = layer_norm(f_p, c(w.ln1_scale), c(w.ln1_bias), kLayerNormEps);
  const ag::Var f_v_prime = ag::add(ag::linear(normed1, c(w.value_weight), c(w.value_bias)), f_p);
  const ag::Var normed2 = layer_norm(f_v_prime, c(w.ln2_scale), c(w.ln2_bias), kLayerNormEps);
  const ag::Var f_v = ag::add(
      feed_forward(normed2, c(w.ffn_w1), c(w.ffn_b1), c(w.ffn_w2), c(w.ffn_b2)), f_v_prime);
  return {f_v_prime, f_v};
}

std::pair<Tensor, Tensor> vencoder_forward(const Tensor& f_p, const VEncoderWeights& w) {
  ag::Tape tape;
  const std::size_t d = f_p.cols();
  auto [vp, v] = vencoder_forward(tape.constant(f_p.reshaped({f_p.rows(), d})), w);
  return {vp.value().reshaped(f_p.shape()), v.value().reshaped(f_p.shape())};
}

namespace {

ag::Var apply_norm(const ag::Var& f_v, std::span<const std::size_t> segment_rows, CSHParams& p,
                   const ClipWeightBundle& bundle, Mode mode, ParamBinder& bind) {
  ag::Tape& tape = f_v.tape();
  const CSHConfig& cfg = p.config;
  const std::size_t d = f_v.cols();
  auto affine = [&](const ag::Var& x) {
    return ag::add_rowvec(ag::mul_rowvec(x, bind("csh.norm.scale", p.bn_scale)),
                          bind("csh.norm.shift", p.bn_shift));
  };
  switch (cfg.norm) {
    case NormKind::kBatch: {
      if (mode == Mode::kTrain) {
        const Tensor& x = f_v.value();
        const std::size_t n = x.rows();
        if (n < 2) throw std::invalid_argument("batch norm needs at least 2 positions in train mode");
        for (std::size_t j = 0; j < d; ++j) {
          double m = 0.0;
          for (std::size_t r = 0; r < n; ++r) m += x[r * d + j];
          m /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t r = 0; r < n; ++r) var += (x[r * d + j] - m) * (x[r * d + j] - m);
          var /= static_cast<double>(n - 1);
          p.bn_running_mean[j] = (1.0 - cfg.bn_momentum) * p.bn_running_mean[j] + cfg.bn_momentum * m;
          p.bn_running_var[j] = (1.0 - cfg.bn_momentum) * p.bn_running_var[j] + cfg.bn_momentum * var;
        }
        ++p.bn_batches_tracked;
        return affine(ag::normalize_cols(f_v, cfg.bn_epsilon));
      }
      if (p.bn_batches_tracked == 0) {
        throw std::logic_error("batch norm running statistics are uninitialized; "
                               "run at least one train-mode pass before eval");
      }
      Tensor shift({d}), inv_std({d});
      for (std::size_t j = 0; j < d; ++j) {
        shift[j] = -p.bn_running_mean[j];
        inv_std[j] = 1.0 / std::sqrt(p.bn_running_var[j] + cfg.bn_epsilon);
      }
      return affine(ag::mul_rowvec(ag::add_rowvec(f_v, tape.constant(shift)), tape.constant(inv_std)));
    }
    case NormKind::kGroup: {
      const std::size_t groups = std::min(cfg.gn_groups, d);
      return affine(ag::normalize_groups(f_v, segment_rows, groups, cfg.bn_epsilon));
    }
    case NormKind::kLayerFrozen:
      return layer_norm(f_v, tape.constant(bundle.mini_encoder.ln_post_scale),
                        tape.constant(bundle.mini_encoder.ln_post_bias), kLayerNormEps);
    case NormKind::kLayerLearn:
      return affine(ag::normalize_rows(f_v, kLayerNormEps));
    case NormKind::kNone:
      return f_v;
  }
  throw std::logic_error("unhandled normalization kind");
}

}  // namespace

CSHVars csh_forward(const ag::Var& features, std::span<const std::size_t> segment_rows,
                    CSHParams& params, const ClipWeightBundle& bundle, Mode mode,
                    ParamBinder& bind) {
  if (features.cols() != params.in_channels()) {
    throw std::invalid_argument("csh: feature width " + std::to_string(features.cols()) +
                                " != MLP input " + std::to_string(params.in_channels()));
  }
  if (params.d_vis() != bundle.d_vis) {
    throw std::invalid_argument("csh: MLP output " + std::to_string(params.d_vis()) +
                                " != bundle d_vis " + std::to_string(bundle.d_vis));
  }
  if (params.config.vencoder_blocks > bundle.vencoders.size()) {
    throw std::invalid_argument("csh: bundle carries only " +
                                std::to_string(bundle.vencoders.size()) + " VEncoder blocks");
  }
  ag::Tape& tape = features.tape();
  CSHVars out;
  const ag::Var hidden = ag::gelu(ag::linear(features, bind("csh.mlp.fc1.weight", params.mlp_w1),
                                             bind("csh.mlp.fc1.bias", params.mlp_b1)));
  out.f_p = ag::linear(hidden, bind("csh.mlp.fc2.weight", params.mlp_w2),
                       bind("csh.mlp.fc2.bias", params.mlp_b2));
  out.f_v_prime = out.f_v = out.f_p;
  for (std::size_t i = params.config.vencoder_blocks; i-- > 0;) {
    std::tie(out.f_v_prime, out.f_v) = vencoder_forward(out.f_v, bundle.vencoders[i]);
  }
  out.f_bn = apply_norm(out.f_v, segment_rows, params, bundle, mode, bind);
  out.f_res = ag::add(out.f_p, out.f_bn);
  out.f_c = ag::linear(out.f_res, tape.constant(bundle.visual_projection),
                       tape.constant(bundle.visual_projection_bias));
  return out;
}

CSHTrace csh_forward(const DenseFeatureMap& f, CSHParams& params, const ClipWeightBundle& bundle,
                     Mode mode) {
  ag::Tape tape;
  ParamBinder bind(tape, false);
  const std::size_t h = f.height(), w = f.width();
  const std::size_t rows[] = {h * w};
  const CSHVars v = csh_forward(tape.constant(f.data.reshaped({h * w, f.channels()})), rows,
                                params, bundle, mode, bind);
  auto grid = [&](const ag::Var& x) { return x.value().reshaped({h, w, x.cols()}); };
  return CSHTrace{grid(v.f_p), grid(v.f_v_prime), grid(v.f_v),
                  grid(v.f_bn), grid(v.f_res), grid(v.f_c)};
}

std::string frozen_fingerprint(const ClipWeightBundle& bundle) {
  return to_archive(bundle).digest();
}

}  // namespace chimera
