// SPDX-License-Identifier: Apache-2.0
#include "chimera/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "chimera/errors.hpp"
#include "chimera/params.hpp"
#include "chimera/selective_distillation.hpp"
#include "chimera/zss_objective.hpp"

namespace chimera {

namespace {

Tensor rows_of(const Tensor& m, std::span<const int> ids) {
  Tensor out({ids.size(), m.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto src = m.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Tensor stack(const Tensor& a, const Tensor& b) {
  std::vector<double> v(a.storage());
  v.insert(v.end(), b.storage().begin(), b.storage().end());
  return Tensor({a.rows() + b.rows(), a.cols()}, std::move(v));
}

ag::Var mean_of(ag::Tape& tape, const std::vector<ag::Var>& terms) {
  if (terms.empty()) return tape.constant(Tensor({1}, 0.0));
  ag::Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
  return ag::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

std::vector<std::size_t> sample_batch(std::size_t n, std::size_t b, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < b; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(b);
  return idx;
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

std::string loss_log_header() { return "iteration,l_seg,l_sgd,l_sam,total,K"; }

std::string format_loss_record(const LossRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%zu", r.iteration, r.l_seg,
                r.l_sgd, r.l_sam, r.total, r.k);
  return buf;
}

TrainContext prepare_training(const TrainConfig& cfg, const DatasetManifest& data,
                              const ClipWeightBundle& bundle) {
  TrainContext ctx;
  ctx.split = data.split;
  ctx.split.mode = cfg.mode;
  ctx.bundle = &bundle;
  const Tensor a_full = embed_class_names(data.split.names, bundle);
  ctx.a_s = rows_of(a_full, data.split.seen_ids);
  ctx.a_u = rows_of(a_full, data.split.unseen_ids);
  const std::size_t stride = cfg.backbone.stride;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Sample s = load_sample(data, i);
    PreparedImage p;
    p.clip = encode_image(s.image, bundle);
    PseudoMaskConfig pc = cfg.pseudo;
    pc.seed = cfg.seed + i;
    const bool transductive = cfg.mode == ZSMode::kTransductive && ctx.a_u.rows() > 0;
    p.pseudo = generate_pseudo_mask(p.clip.patch_tokens, p.clip.grid_h, p.clip.grid_w,
                                    training_labels(s.gt, data.split), ctx.a_s, pc,
                                    transductive ? &ctx.a_u : nullptr);
    if (s.gt.height % stride != 0 || s.gt.width % stride != 0)
      throw std::invalid_argument("image size not divisible by backbone stride");
    p.feature_labels = downsample_nearest(p.pseudo.labels, s.gt.height / stride, s.gt.width / stride).labels;
    p.image = std::move(s.image);
    p.gt = std::move(s.gt);
    ctx.images.push_back(std::move(p));
  }
  return ctx;
}

StepResult training_step(ChimeraModel& model, const TrainContext& ctx, const TrainConfig& cfg,
                         std::span<const std::size_t> batch, std::int64_t iteration, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  const ClipWeightBundle& bundle = *ctx.bundle;
  const std::size_t n_seen = ctx.a_s.rows();
  const bool transductive = cfg.mode == ZSMode::kTransductive && ctx.a_u.rows() > 0;

  ag::Tape tape;
  ParamBinder bind(tape, true);
  std::vector<ag::Var> feats;
  std::vector<std::size_t> segs;
  for (std::size_t idx : batch) {
    const auto stages = backbone_forward(ctx.images[idx].image, model.backbone, bind);
    feats.push_back(stages.back().rows);
    segs.push_back(stages.back().rows.rows());
  }
  const CSHVars csh = csh_forward(ag::concat_rows(feats), segs, model.csh, bundle, Mode::kTrain, bind);

  const ag::Var a_s = tape.constant(ctx.a_s);
  const ag::Var full_classifier = transductive ? tape.constant(stack(ctx.a_s, ctx.a_u)) : ag::Var();
  std::vector<ag::Var> seg_terms, sam_terms, f_g_rows;
  std::vector<double> c_g_rows;
  std::size_t k_used = 0;
  std::size_t offset = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PreparedImage& img = ctx.images[batch[b]];
    const std::size_t n = segs[b];
    const ag::Var f_c = ag::slice_rows(csh.f_c, offset, offset + n);
    offset += n;
    if (img.feature_labels.size() != n)
      throw std::logic_error("pseudo mask does not match the feature grid");
    const Tensor& c_g = img.clip.cls_token;
    const ag::Var c_g_var = tape.constant(c_g.reshaped({1, c_g.numel()}));

    // Selective global distillation.
    const std::size_t k = decayed_k(iteration, cfg.sgd_schedule, n);
    k_used = k;
    const Tensor scores = similarity_scores(f_c.value(), c_g);
    const auto picked = gumbel_topk(scores.values(), k, cfg.sgd_tau, rng, cfg.sgd_noise);
    f_g_rows.push_back(aggregate_global(ag::gather_rows(f_c, picked), c_g_var).f_g);
    c_g_rows.insert(c_g_rows.end(), c_g.values().begin(), c_g.values().end());

    // Prototypes and semantic alignment.
    const PrototypeVars protos = compute_prototypes(f_c, img.feature_labels, n_seen);
    if (protos.seen.valid()) {
      sam_terms.push_back(sam_loss(protos.seen, tape.constant(rows_of(ctx.a_s, protos.seen_ids)),
                                   c_g_var, cfg.sam_tau_f, cfg.sam_tau_c));
    }

    // Pixel classification against cat(A_s, latent prototypes).
    std::vector<int> labels = img.feature_labels;
    ag::Var classifier;
    if (transductive) {
      classifier = full_classifier;
    } else {
      for (int& y : labels) {
        if (y == kIgnoreLabel || y < static_cast<int>(n_seen)) continue;
        const auto it = std::find(protos.latent_ids.begin(), protos.latent_ids.end(), y);
        y = static_cast<int>(n_seen) + static_cast<int>(it - protos.latent_ids.begin());
      }
      const ag::Var parts[] = {a_s, protos.latent};
      classifier = protos.latent.valid() ? ag::concat_rows(parts) : a_s;
    }
    seg_terms.push_back(seg_loss(pixel_logits(f_c, classifier), labels, cfg.focal));
  }

  const ag::Var l_sgd = sgd_loss(ag::concat_rows(f_g_rows),
                                 tape.constant(Tensor({batch.size(), bundle.d_emb}, c_g_rows)),
                                 cfg.sgd_tau);
  const ag::Var l_seg = mean_of(tape, seg_terms);
  const ag::Var l_sam = mean_of(tape, sam_terms);
  const ag::Var total = total_loss(l_seg, l_sgd, l_sam, cfg.lambda_sam);

  StepResult r;
  r.record.iteration = iteration;
  r.record.l_seg = l_seg.value()[0];
  r.record.l_sgd = l_sgd.value()[0];
  r.record.l_sam = l_sam.value()[0];
  r.record.total = total.value()[0];
  r.record.k = k_used;
  if (!std::isfinite(r.record.total)) return r;
  tape.backward(total);
  for (const auto& [name, var] : bind.bound()) {
    const Tensor g = tape.grad(var);
    auto it = r.grads.find(name);
    if (it == r.grads.end()) {
      r.grads.emplace(name, g);
    } else {
      for (std::size_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
    }
  }
  return r;
}

double learning_rate(const TrainConfig& cfg, std::int64_t t) {
  const auto warm = static_cast<std::int64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(cfg.iterations)));
  if (warm > 0 && t < warm) return cfg.lr * static_cast<double>(t + 1) / static_cast<double>(warm);
  return cfg.lr;
}

void adam_update(ChimeraModel& model, AdamState& adam, const std::map<std::string, Tensor>& grads,
                 const TrainConfig& cfg, double lr) {
  ++adam.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
  model.for_each_trainable([&](const std::string& name, Tensor& p) {
    const auto git = grads.find(name);
    if (git == grads.end()) return;
    const Tensor& g = git->second;
    Tensor& m = adam.m.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = adam.v.try_emplace(name, Tensor(p.shape())).first->second;
    const bool decay = name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double step = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      p[i] -= lr * (step + (decay ? cfg.weight_decay * p[i] : 0.0));
    }
  });
}

void calibrate_batch_norm(ChimeraModel& model, const TrainContext& ctx, std::size_t batch_size) {
  if (model.csh.config.norm != NormKind::kBatch) return;
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t start = 0; start < ctx.images.size(); start += batch_size) {
    ag::Tape tape;
    ParamBinder bind(tape, false);
    std::vector<ag::Var> feats;
    std::vector<std::size_t> segs;
    for (std::size_t i = start; i < std::min(ctx.images.size(), start + batch_size); ++i) {
      const auto stages = backbone_forward(ctx.images[i].image, model.backbone, bind);
      feats.push_back(stages.back().rows);
      segs.push_back(stages.back().rows.rows());
    }
    csh_forward(ag::concat_rows(feats), segs, model.csh, *ctx.bundle, Mode::kTrain, bind);
  }
}

Checkpoint initial_checkpoint(const TrainConfig& cfg, const DatasetManifest& data,
                              const ClipWeightBundle& bundle) {
  validate_config(cfg);
  const TrainContext ctx = prepare_training(cfg, data, bundle);
  Checkpoint ckpt;
  ckpt.model = init_model(cfg.backbone, cfg.csh, bundle.d_vis, cfg.seed);
  calibrate_batch_norm(ckpt.model, ctx, cfg.batch_size);
  ckpt.fingerprint = frozen_fingerprint(bundle);
  ckpt.config_snapshot = config_to_text(cfg);
  Rng rng(cfg.seed);
  rng.discard(1);
  ckpt.rng_state = rng_state(rng);
  return ckpt;
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& data,
                  const ClipWeightBundle& bundle, const TrainOptions& opts) {
  validate_config(cfg);
  const std::string fingerprint = frozen_fingerprint(bundle);
  const TrainContext ctx = prepare_training(cfg, data, bundle);

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  Rng rng(cfg.seed);
  if (opts.resume != nullptr) {
    check_compatible(*opts.resume, bundle);
    ckpt = *opts.resume;
    std::istringstream is(ckpt.rng_state);
    is >> rng;
    if (!is) throw FormatError("checkpoint rng state is unreadable");
  } else {
    ckpt.model = init_model(cfg.backbone, cfg.csh, bundle.d_vis, cfg.seed);
    rng.discard(1);  // keep the training stream apart from the init stream
  }
  ckpt.fingerprint = fingerprint;
  ckpt.config_snapshot = config_to_text(cfg);

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const bool append = opts.resume != nullptr;
    log.open(cfg.out_dir / "loss_log.csv", append ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + (cfg.out_dir / "loss_log.csv").string());
    if (!append) log << loss_log_header() << "\n";
  }

  const std::size_t b = std::min(cfg.batch_size, ctx.images.size());
  for (std::int64_t t = ckpt.iteration; t < cfg.iterations; ++t) {
    const auto batch = sample_batch(ctx.images.size(), b, rng);
    StepResult step = training_step(ckpt.model, ctx, cfg, batch, t, rng);
    const LossRecord& rec = step.record;
    if (!std::isfinite(rec.total) || !std::isfinite(rec.l_seg) || !std::isfinite(rec.l_sgd) ||
        !std::isfinite(rec.l_sam)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(t), static_cast<long>(t));
    }
    adam_update(ckpt.model, ckpt.adam, step.grads, cfg, learning_rate(cfg, t));
    ckpt.iteration = t + 1;
    ckpt.rng_state = rng_state(rng);
    result.log.push_back(rec);
    if (log.is_open()) log << format_loss_record(rec) << "\n" << std::flush;
    if (opts.on_iteration) opts.on_iteration(rec);
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06" PRId64, t + 1);
      save_checkpoint(ckpt, cfg.out_dir / "checkpoints" / name);
    }
  }
  ckpt.rng_state = rng_state(rng);
  if (frozen_fingerprint(bundle) != fingerprint)
    throw std::logic_error("frozen bundle changed during training");
  if (!cfg.out_dir.empty()) save_checkpoint(ckpt, cfg.out_dir / "checkpoint");
  return result;
}

}  // namespace chimera
