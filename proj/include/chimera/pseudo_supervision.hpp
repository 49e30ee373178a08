// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chimera/autograd.hpp"
#include "chimera/selective_distillation.hpp"
#include "chimera/tensor.hpp"

namespace chimera {

inline constexpr int kIgnoreLabel = 255;

/// Row-major H x W integer grid.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = kIgnoreLabel)
      : height(h), width(w), labels(h * w, fill) {}
  int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

LabelMap downsample_nearest(const LabelMap& in, std::size_t out_h, std::size_t out_w);
LabelMap upsample_nearest(const LabelMap& in, std::size_t out_h, std::size_t out_w);

enum class ZSMode { kInductive, kTransductive };
ZSMode parse_zs_mode(const std::string& s);
std::string to_string(ZSMode m);

/// Partition of global class IDs [0, N) into seen and unseen.
struct ZSSplit {
  std::vector<int> seen_ids;
  std::vector<int> unseen_ids;
  std::vector<std::string> names;    // indexed by global ID
  std::vector<std::string> prompts;  // indexed by global ID
  ZSMode mode = ZSMode::kInductive;

  std::size_t num_classes() const { return names.size(); }
  std::size_t num_seen() const { return seen_ids.size(); }
  std::size_t num_unseen() const { return unseen_ids.size(); }
  bool is_seen(int id) const;
  bool is_unseen(int id) const;
  /// Position of a global seen ID inside seen_ids, or -1.
  int seen_index(int id) const;
  /// Throws unless the sets are disjoint and cover [0, N).
  void validate() const;
};

ZSSplit make_split(std::vector<std::string> names, std::vector<int> seen_ids,
                   std::vector<int> unseen_ids, ZSMode mode = ZSMode::kInductive);

/// Supervision grid: seen classes use [0, n_seen), latent regions
/// [n_seen, n_seen + o_u), everything else kIgnoreLabel.
struct PseudoMask {
  LabelMap labels;
  std::size_t n_seen = 0;
  std::size_t o_u = 0;
};

/// Throws if any label breaks the PseudoMask value range.
void validate_pseudo_mask(const PseudoMask& m);

struct PseudoMaskConfig {
  std::size_t k_clusters = 8;
  std::size_t iterations = 50;
  double theta = 0.7;
  std::size_t min_area = 4;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Tensor initial_centroids;
  Tensor centroids;
  std::vector<int> assignment;
  std::size_t iterations_run = 0;
};

/// k-means++ seeding over the rows of `points`.
Tensor kmeans_plus_plus_init(const Tensor& points, std::size_t k, Rng& rng);
/// Lloyd iterations from `initial` until assignments settle or `max_iter`.
KMeansResult lloyd(const Tensor& points, const Tensor& initial, std::size_t max_iter);
KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iter, Rng& rng);

/// Keeps ground-truth seen labels; clusters the remaining pixels on their
/// (nearest-upsampled) patch tokens. A cluster whose centroid is within
/// cosine theta of a seen text embedding takes that class, the rest become
/// latent IDs in descending size order, and clusters below min_area are
/// ignored. When `a_u` is given (transductive training) non-seen clusters
/// map to their closest unseen embedding instead, IDs n_seen + u.
PseudoMask generate_pseudo_mask(const Tensor& patch_tokens, std::size_t grid_h,
                                std::size_t grid_w, const LabelMap& gt_seen, const Tensor& a_s,
                                const PseudoMaskConfig& cfg, const Tensor* a_u = nullptr);

/// Class-wise masked means of f_c, ids ascending.
struct PrototypeSet {
  Tensor prototypes;  // [O, d_emb]
  std::vector<int> ids;
  std::size_t n_seen = 0;
  std::size_t o_s() const;
  std::size_t o_u() const { return ids.size() - o_s(); }
};

struct PrototypeGroup {
  Tensor prototypes;
  std::vector<int> ids;
};

/// f_c is [H', W', d] (or [H'W', d]) aligned with `mask`.
PrototypeSet compute_prototypes(const Tensor& f_c, const LabelMap& mask, std::size_t n_seen);

std::pair<PrototypeGroup, PrototypeGroup> split_prototypes(const PrototypeSet& p);

/// Tape version used in training; both groups stay differentiable.
struct PrototypeVars {
  ag::Var seen, latent;  // invalid when the group is empty
  std::vector<int> seen_ids, latent_ids;
};
PrototypeVars compute_prototypes(const ag::Var& f_c, const std::vector<int>& labels,
                                 std::size_t n_seen);

/// KL(softmax(p_logits) || softmax(q_logits)) over flat vectors.
ag::Var kl_divergence_logits(const ag::Var& p_logits, const ag::Var& q_logits);

/// KL(softmax(F_s c_g / tau_f) || softmax(A_s c_g / tau_c)); 0 when O_s = 1.
ag::Var sam_loss(const ag::Var& f_l_s, const ag::Var& a_s_present, const ag::Var& c_g,
                 double tau_f, double tau_c);
double sam_loss(const Tensor& f_l_s, const Tensor& a_s_present, const Tensor& c_g, double tau_f,
                double tau_c);

}  // namespace chimera
