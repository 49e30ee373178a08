// SPDX-License-Identifier: Apache-2.0
#include "chimera/evaluate.hpp"

#include "chimera/model.hpp"

namespace chimera {

std::vector<Tensor> dataset_embeddings(const Checkpoint& ckpt, const DatasetManifest& data,
                                       const ClipWeightBundle& bundle) {
  check_compatible(ckpt, bundle);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    out.push_back(dense_embeddings(ckpt.model, bundle, load_sample(data, i).image));
  return out;
}

EvalResult evaluate_embeddings(const std::vector<Tensor>& f_c, const DatasetManifest& data,
                               const ClipWeightBundle& bundle, double gamma) {
  if (f_c.size() != data.size()) throw std::invalid_argument("evaluate: embedding count mismatch");
  const Tensor a_full = embed_class_names(data.split.names, bundle);
  EvalResult r;
  std::vector<LabelMap> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    LabelMap gt = load_sample(data, i).gt;
    const LabelMap coarse = calibrated_inference(f_c[i], a_full, data.split, gamma);
    r.predictions.push_back(upsample_nearest(coarse, gt.height, gt.width));
    gts.push_back(std::move(gt));
  }
  r.report = compute_metrics(r.predictions, gts, data.split);
  r.unseen_pixels = count_unseen_pixels(r.predictions, data.split);
  return r;
}

EvalResult evaluate(const Checkpoint& ckpt, const DatasetManifest& data,
                    const ClipWeightBundle& bundle, double gamma) {
  return evaluate_embeddings(dataset_embeddings(ckpt, data, bundle), data, bundle, gamma);
}

std::size_t count_unseen_pixels(const std::vector<LabelMap>& preds, const ZSSplit& split) {
  std::size_t n = 0;
  for (const auto& p : preds)
    for (int v : p.labels)
      if (split.is_unseen(v)) ++n;
  return n;
}

}  // namespace chimera
