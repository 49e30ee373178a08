// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chimera/autograd.hpp"
#include "chimera/pseudo_supervision.hpp"
#include "chimera/tensor.hpp"

namespace chimera {

/// logit(i, m) = <f_c[i], classifier[m]>. f_c is [H', W', d] or [n, d];
/// the result keeps the leading axes and ends in M.
Tensor pixel_logits(const Tensor& f_c, const Tensor& classifier);
ag::Var pixel_logits(const ag::Var& f_c, const ag::Var& classifier);

struct FocalConfig {
  double gamma = 2.0;
  double alpha = 0.25;
};

/// Mean cross-entropy plus mean softmax focal loss
/// -alpha (1 - p_t)^gamma log p_t over positions whose label is not
/// kIgnoreLabel. Returns 0 when every position is ignored.
ag::Var seg_loss(const ag::Var& logits, std::span<const int> labels, const FocalConfig& cfg = {});
double seg_loss(const Tensor& logits, std::span<const int> labels, const FocalConfig& cfg = {});

double total_loss(double l_seg, double l_sgd, double l_sam, double lambda_sam);
ag::Var total_loss(const ag::Var& l_seg, const ag::Var& l_sgd, const ag::Var& l_sam,
                   double lambda_sam);

/// Adds gamma to unseen-class logits, then argmax (ties to the lower ID).
/// logits is [H', W', N] ordered by global class ID.
LabelMap calibrated_argmax(const Tensor& logits, const ZSSplit& split, double gamma);
LabelMap calibrated_inference(const Tensor& f_c, const Tensor& a_full, const ZSSplit& split,
                              double gamma);

/// Dataset-level per-class pixel counts; ignore pixels in the ground truth
/// are excluded.
struct ConfusionCounts {
  std::vector<std::uint64_t> intersection, union_, gt_pixels;
  std::uint64_t correct = 0, total = 0;

  explicit ConfusionCounts(std::size_t n_classes = 0)
      : intersection(n_classes, 0), union_(n_classes, 0), gt_pixels(n_classes, 0) {}
  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionCounts& other);
};

struct MetricsReport {
  std::vector<double> per_class_iou;  // 0 where undefined
  std::vector<bool> defined;          // union > 0
  double s_iou = 0.0, u_iou = 0.0, h_iou = 0.0, p_acc = 0.0;
  ConfusionCounts counts;
};

double harmonic_iou(double s_iou, double u_iou);

MetricsReport metrics_from_counts(const ConfusionCounts& counts, const ZSSplit& split);
MetricsReport compute_metrics(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                              const ZSSplit& split);

/// "class,iou,seen" rows followed by a summary line.
std::string metrics_csv(const MetricsReport& report, const ZSSplit& split);
std::string metrics_summary(const MetricsReport& report);

}  // namespace chimera
