// SPDX-License-Identifier: Apache-2.0
#include "chimera/zss_objective.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace chimera {

Tensor pixel_logits(const Tensor& f_c, const Tensor& classifier) {
  if (f_c.cols() != classifier.cols() || classifier.dim() != 2) {
    throw std::invalid_argument("pixel_logits: feature width " + std::to_string(f_c.cols()) +
                                " vs classifier " + shape_to_string(classifier.shape()));
  }
  ag::Tape tape;
  const Tensor out = ag::matmul_nt(tape.constant(f_c.reshaped({f_c.rows(), f_c.cols()})),
                                   tape.constant(classifier))
                         .value();
  Shape shape = f_c.shape();
  shape.back() = classifier.rows();
  return out.reshaped(shape);
}

ag::Var pixel_logits(const ag::Var& f_c, const ag::Var& classifier) {
  if (f_c.cols() != classifier.cols()) {
    throw std::invalid_argument("pixel_logits: feature width " + std::to_string(f_c.cols()) +
                                " vs classifier width " + std::to_string(classifier.cols()));
  }
  return ag::matmul_nt(f_c, classifier);
}

ag::Var seg_loss(const ag::Var& logits, std::span<const int> labels, const FocalConfig& cfg) {
  const std::size_t n = logits.rows(), m = logits.cols();
  if (labels.size() != n) {
    throw std::invalid_argument("seg_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " positions");
  }
  std::size_t valid = 0;
  for (int y : labels) {
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= m) {
      throw std::invalid_argument("seg_loss: label " + std::to_string(y) + " >= class count " +
                                  std::to_string(m));
    }
    ++valid;
  }
  const Tensor& z = logits.value();
  Tensor grad_z({n, m});  // d loss / d logits, filled now and scaled in backward
  double loss = 0.0;
  if (valid > 0) {
    const double inv = 1.0 / static_cast<double>(valid);
    std::vector<double> p(m);
    for (std::size_t i = 0; i < n; ++i) {
      const int y = labels[i];
      if (y == kIgnoreLabel) continue;
      const double* row = z.data() + i * m;
      const double mx = *std::max_element(row, row + m);
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += (p[j] = std::exp(row[j] - mx));
      const double log_s = std::log(s);
      for (double& v : p) v /= s;
      const auto t = static_cast<std::size_t>(y);
      const double log_pt = row[t] - mx - log_s;
      const double pt = p[t];
      const double q = 1.0 - pt;
      const double q_g = std::pow(q, cfg.gamma);
      loss += inv * (-log_pt - cfg.alpha * q_g * log_pt);
      // d focal / d z_j = alpha * (gamma q^(gamma-1) p_t log p_t - q^gamma) * (delta_tj - p_j)
      const double q_g1 = cfg.gamma == 0.0 ? 0.0 : cfg.gamma * std::pow(q, cfg.gamma - 1.0);
      const double coef = cfg.alpha * (q_g1 * pt * log_pt - q_g);
      for (std::size_t j = 0; j < m; ++j) {
        const double delta = j == t ? 1.0 : 0.0;
        grad_z[i * m + j] = inv * ((p[j] - delta) + coef * (delta - p[j]));
      }
    }
  }
  const ag::Var inputs[] = {logits};
  return logits.tape().record(Tensor({1}, loss), inputs,
                              [logits, grad_z](ag::Tape& t, const Tensor& g) {
                                Tensor& gl = t.grad_buffer(logits);
                                for (std::size_t i = 0; i < gl.numel(); ++i) gl[i] += g[0] * grad_z[i];
                              });
}

double seg_loss(const Tensor& logits, std::span<const int> labels, const FocalConfig& cfg) {
  ag::Tape tape;
  return seg_loss(tape.constant(logits.reshaped({logits.rows(), logits.cols()})), labels, cfg)
      .value()[0];
}

double total_loss(double l_seg, double l_sgd, double l_sam, double lambda_sam) {
  return l_seg + l_sgd + lambda_sam * l_sam;
}

ag::Var total_loss(const ag::Var& l_seg, const ag::Var& l_sgd, const ag::Var& l_sam,
                   double lambda_sam) {
  return ag::add(ag::add(l_seg, l_sgd), ag::scale(l_sam, lambda_sam));
}

LabelMap calibrated_argmax(const Tensor& logits, const ZSSplit& split, double gamma) {
  if (logits.dim() != 3 || logits.size(2) != split.num_classes()) {
    throw std::invalid_argument("calibrated_argmax: logits " + shape_to_string(logits.shape()) +
                                " do not end in " + std::to_string(split.num_classes()) +
                                " classes");
  }
  const std::size_t h = logits.size(0), w = logits.size(1), n = logits.size(2);
  std::vector<double> bias(n, 0.0);
  for (int u : split.unseen_ids) bias[static_cast<std::size_t>(u)] = gamma;
  LabelMap out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double* row = logits.data() + i * n;
    std::size_t best = 0;
    double best_v = row[0] + bias[0];
    for (std::size_t c = 1; c < n; ++c) {
      const double v = row[c] + bias[c];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.labels[i] = static_cast<int>(best);
  }
  return out;
}

LabelMap calibrated_inference(const Tensor& f_c, const Tensor& a_full, const ZSSplit& split,
                              double gamma) {
  if (f_c.dim() != 3) throw std::invalid_argument("calibrated_inference: f_c must be [H', W', d]");
  if (a_full.rows() != split.num_classes()) {
    throw std::invalid_argument("calibrated_inference: " + std::to_string(a_full.rows()) +
                                " embeddings for " + std::to_string(split.num_classes()) +
                                " classes");
  }
  return calibrated_argmax(pixel_logits(f_c, a_full), split, gamma);
}

void ConfusionCounts::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("metrics: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " +
                                std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  const std::size_t n = intersection.size();
  std::vector<std::uint64_t> pred_pixels(n, 0), gt_here(n, 0), inter_here(n, 0);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i];
    if (g == kIgnoreLabel) continue;
    if (g < 0 || static_cast<std::size_t>(g) >= n) {
      throw std::invalid_argument("metrics: ground-truth label " + std::to_string(g) +
                                  " out of range");
    }
    const int p = pred.labels[i];
    ++total;
    ++gt_here[static_cast<std::size_t>(g)];
    if (p >= 0 && static_cast<std::size_t>(p) < n) ++pred_pixels[static_cast<std::size_t>(p)];
    if (p == g) {
      ++correct;
      ++inter_here[static_cast<std::size_t>(g)];
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    intersection[c] += inter_here[c];
    gt_pixels[c] += gt_here[c];
    union_[c] += gt_here[c] + pred_pixels[c] - inter_here[c];
  }
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.intersection.size() != intersection.size())
    throw std::invalid_argument("metrics: class count mismatch in merge");
  for (std::size_t c = 0; c < intersection.size(); ++c) {
    intersection[c] += other.intersection[c];
    union_[c] += other.union_[c];
    gt_pixels[c] += other.gt_pixels[c];
  }
  correct += other.correct;
  total += other.total;
}

double harmonic_iou(double s_iou, double u_iou) {
  if (s_iou <= 0.0 || u_iou <= 0.0) return 0.0;
  return 2.0 * s_iou * u_iou / (s_iou + u_iou);
}

MetricsReport metrics_from_counts(const ConfusionCounts& counts, const ZSSplit& split) {
  const std::size_t n = split.num_classes();
  if (counts.intersection.size() != n) throw std::invalid_argument("metrics: class count mismatch");
  MetricsReport r;
  r.counts = counts;
  r.per_class_iou.assign(n, 0.0);
  r.defined.assign(n, false);
  for (std::size_t c = 0; c < n; ++c) {
    if (counts.union_[c] == 0) continue;
    r.defined[c] = true;
    r.per_class_iou[c] =
        static_cast<double>(counts.intersection[c]) / static_cast<double>(counts.union_[c]);
  }
  auto mean_over = [&](const std::vector<int>& ids) {
    double s = 0.0;
    std::size_t k = 0;
    for (int id : ids) {
      if (!r.defined[static_cast<std::size_t>(id)]) continue;
      s += r.per_class_iou[static_cast<std::size_t>(id)];
      ++k;
    }
    return k == 0 ? 0.0 : s / static_cast<double>(k);
  };
  r.s_iou = mean_over(split.seen_ids);
  r.u_iou = mean_over(split.unseen_ids);
  r.h_iou = harmonic_iou(r.s_iou, r.u_iou);
  r.p_acc = counts.total == 0 ? 0.0
                              : static_cast<double>(counts.correct) / static_cast<double>(counts.total);
  return r;
}

MetricsReport compute_metrics(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                              const ZSSplit& split) {
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(gts.size()) + " ground truths");
  }
  if (preds.empty()) throw std::invalid_argument("metrics: empty dataset");
  ConfusionCounts counts(split.num_classes());
  for (std::size_t i = 0; i < preds.size(); ++i) counts.add(preds[i], gts[i]);
  return metrics_from_counts(counts, split);
}

std::string metrics_summary(const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "sIoU=%.4f uIoU=%.4f hIoU=%.4f pAcc=%.4f", r.s_iou, r.u_iou,
                r.h_iou, r.p_acc);
  return buf;
}

std::string metrics_csv(const MetricsReport& r, const ZSSplit& split) {
  std::string out = "class,iou,seen\n";
  char buf[64];
  for (std::size_t c = 0; c < split.num_classes(); ++c) {
    if (r.defined[c]) {
      std::snprintf(buf, sizeof buf, "%.6f", r.per_class_iou[c]);
    } else {
      std::snprintf(buf, sizeof buf, "nan");
    }
    out += split.names[c] + "," + buf + "," + (split.is_seen(static_cast<int>(c)) ? "1" : "0") + "\n";
  }
  out += "# " + metrics_summary(r) + "\n";
  return out;
}

}  // namespace chimera
