// SPDX-License-Identifier: Apache-2.0
#include "chimera/pseudo_supervision.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace chimera {

LabelMap downsample_nearest(const LabelMap& in, std::size_t out_h, std::size_t out_w) {
  LabelMap out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = ((2 * y + 1) * in.height) / (2 * out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = ((2 * x + 1) * in.width) / (2 * out_w);
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

LabelMap upsample_nearest(const LabelMap& in, std::size_t out_h, std::size_t out_w) {
  LabelMap out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      out.at(y, x) = in.at(y * in.height / out_h, x * in.width / out_w);
  return out;
}

ZSMode parse_zs_mode(const std::string& s) {
  if (s == "inductive") return ZSMode::kInductive;
  if (s == "transductive") return ZSMode::kTransductive;
  throw std::invalid_argument("unknown mode '" + s + "' (expected inductive or transductive)");
}

std::string to_string(ZSMode m) {
  return m == ZSMode::kInductive ? "inductive" : "transductive";
}

bool ZSSplit::is_seen(int id) const {
  return std::find(seen_ids.begin(), seen_ids.end(), id) != seen_ids.end();
}

bool ZSSplit::is_unseen(int id) const {
  return std::find(unseen_ids.begin(), unseen_ids.end(), id) != unseen_ids.end();
}

int ZSSplit::seen_index(int id) const {
  const auto it = std::find(seen_ids.begin(), seen_ids.end(), id);
  return it == seen_ids.end() ? -1 : static_cast<int>(it - seen_ids.begin());
}

void ZSSplit::validate() const {
  const std::size_t n = names.size();
  std::vector<int> seen_count(n, 0);
  for (int id : seen_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) throw std::invalid_argument("split: seen id out of range");
    ++seen_count[static_cast<std::size_t>(id)];
  }
  for (int id : unseen_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) throw std::invalid_argument("split: unseen id out of range");
    ++seen_count[static_cast<std::size_t>(id)];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (seen_count[i] != 1) {
      throw std::invalid_argument("split: class " + std::to_string(i) +
                                  " must be in exactly one of seen/unseen");
    }
  }
  if (prompts.size() != n) throw std::invalid_argument("split: prompt count mismatch");
}

ZSSplit make_split(std::vector<std::string> names, std::vector<int> seen_ids,
                   std::vector<int> unseen_ids, ZSMode mode) {
  ZSSplit s;
  for (const auto& n : names) s.prompts.push_back("a photo of a " + n + ".");
  s.names = std::move(names);
  s.seen_ids = std::move(seen_ids);
  s.unseen_ids = std::move(unseen_ids);
  s.mode = mode;
  s.validate();
  return s;
}

void validate_pseudo_mask(const PseudoMask& m) {
  const int limit = static_cast<int>(m.n_seen + m.o_u);
  for (int v : m.labels.labels) {
    if (v != kIgnoreLabel && (v < 0 || v >= limit)) {
      throw std::logic_error("pseudo mask label " + std::to_string(v) + " outside [0, " +
                             std::to_string(limit) + ")");
    }
  }
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace

Tensor kmeans_plus_plus_init(const Tensor& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows(), d = points.cols();
  if (k < 1 || k > n) throw std::invalid_argument("kmeans: k outside [1, n]");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor centers({k, d});
  std::size_t first = std::min(n - 1, static_cast<std::size_t>(unif(rng) * static_cast<double>(n)));
  std::copy(points.row(first).begin(), points.row(first).end(), centers.row(0).begin());
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_dist(points.row(i).data(), centers.row(c - 1).data(), d));
      total += dist[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double r = unif(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist[i];
        if (acc > r && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(n - 1, static_cast<std::size_t>(unif(rng) * static_cast<double>(n)));
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centers.row(c).begin());
  }
  return centers;
}

KMeansResult lloyd(const Tensor& points, const Tensor& initial, std::size_t max_iter) {
  const std::size_t n = points.rows(), d = points.cols(), k = initial.rows();
  KMeansResult r;
  r.initial_centroids = initial;
  r.centroids = initial;
  r.assignment.assign(n, -1);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(points.row(i).data(), r.centroids.row(c).data(), d);
        if (dd < best_d) {
          best_d = dd;
          best = static_cast<int>(c);
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    r.iterations_run = it + 1;
    if (!changed) break;
    Tensor sums({k, d});
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.assignment[i]);
      ++count[c];
      for (std::size_t j = 0; j < d; ++j) sums.at(c, j) += points.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j)
        r.centroids.at(c, j) = sums.at(c, j) / static_cast<double>(count[c]);
    }
  }
  return r;
}

KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iter, Rng& rng) {
  return lloyd(points, kmeans_plus_plus_init(points, k, rng), max_iter);
}

PseudoMask generate_pseudo_mask(const Tensor& patch_tokens, std::size_t grid_h,
                                std::size_t grid_w, const LabelMap& gt_seen, const Tensor& a_s,
                                const PseudoMaskConfig& cfg, const Tensor* a_u) {
  if (cfg.k_clusters < 1) throw std::invalid_argument("pseudo mask: k_clusters must be >= 1");
  if (grid_h == 0 || grid_w == 0 || patch_tokens.rows() != grid_h * grid_w ||
      gt_seen.height % grid_h != 0 || gt_seen.width % grid_w != 0) {
    throw std::invalid_argument("pseudo mask: token grid " + std::to_string(grid_h) + "x" +
                                std::to_string(grid_w) + " does not tile a " +
                                std::to_string(gt_seen.height) + "x" +
                                std::to_string(gt_seen.width) + " mask");
  }
  const std::size_t n_seen = a_s.rows();
  const std::size_t d = patch_tokens.cols();
  PseudoMask out{gt_seen, n_seen, 0};

  std::vector<std::size_t> pixels;
  for (std::size_t i = 0; i < gt_seen.labels.size(); ++i)
    if (gt_seen.labels[i] == kIgnoreLabel) pixels.push_back(i);
  if (pixels.empty()) return out;

  const std::size_t sy = gt_seen.height / grid_h, sx = gt_seen.width / grid_w;
  Tensor points({pixels.size(), d});
  for (std::size_t p = 0; p < pixels.size(); ++p) {
    const std::size_t y = pixels[p] / gt_seen.width, x = pixels[p] % gt_seen.width;
    const std::size_t patch = (y / sy) * grid_w + (x / sx);
    std::copy(patch_tokens.row(patch).begin(), patch_tokens.row(patch).end(), points.row(p).begin());
  }
  Rng rng(cfg.seed);
  const std::size_t k = std::min(cfg.k_clusters, pixels.size());
  const KMeansResult km = kmeans(points, k, cfg.iterations, rng);

  std::vector<std::size_t> size(k, 0);
  for (int a : km.assignment) ++size[static_cast<std::size_t>(a)];

  std::vector<int> cluster_label(k, kIgnoreLabel);
  std::vector<std::size_t> latent;
  for (std::size_t c = 0; c < k; ++c) {
    if (size[c] == 0 || size[c] < cfg.min_area) continue;
    double best = -std::numeric_limits<double>::infinity();
    int best_id = -1;
    for (std::size_t s = 0; s < n_seen; ++s) {
      const double cs = cosine(km.centroids.row(c), a_s.row(s));
      if (cs > best) {
        best = cs;
        best_id = static_cast<int>(s);
      }
    }
    if (best_id >= 0 && best > cfg.theta) {
      cluster_label[c] = best_id;
    } else {
      latent.push_back(c);
    }
  }
  if (a_u != nullptr) {
    for (std::size_t c : latent) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_u = 0;
      for (std::size_t u = 0; u < a_u->rows(); ++u) {
        const double cs = cosine(km.centroids.row(c), a_u->row(u));
        if (cs > best) {
          best = cs;
          best_u = u;
        }
      }
      cluster_label[c] = static_cast<int>(n_seen + best_u);
    }
    out.o_u = a_u->rows();
  } else {
    std::stable_sort(latent.begin(), latent.end(),
                     [&](std::size_t a, std::size_t b) { return size[a] > size[b]; });
    for (std::size_t r = 0; r < latent.size(); ++r)
      cluster_label[latent[r]] = static_cast<int>(n_seen + r);
    out.o_u = latent.size();
  }
  for (std::size_t p = 0; p < pixels.size(); ++p)
    out.labels.labels[pixels[p]] = cluster_label[static_cast<std::size_t>(km.assignment[p])];
  return out;
}

std::size_t PrototypeSet::o_s() const {
  return static_cast<std::size_t>(std::count_if(
      ids.begin(), ids.end(), [&](int id) { return id < static_cast<int>(n_seen); }));
}

namespace {

std::vector<int> present_ids(const std::vector<int>& labels) {
  std::set<int> s;
  for (int v : labels)
    if (v != kIgnoreLabel) s.insert(v);
  return {s.begin(), s.end()};
}

}  // namespace

PrototypeVars compute_prototypes(const ag::Var& f_c, const std::vector<int>& labels,
                                 std::size_t n_seen) {
  if (labels.size() != f_c.rows()) {
    throw std::invalid_argument("prototypes: mask has " + std::to_string(labels.size()) +
                                " positions, features have " + std::to_string(f_c.rows()));
  }
  PrototypeVars out;
  for (int id : present_ids(labels)) {
    (id < static_cast<int>(n_seen) ? out.seen_ids : out.latent_ids).push_back(id);
  }
  if (!out.seen_ids.empty()) out.seen = ag::segment_mean(f_c, labels, out.seen_ids);
  if (!out.latent_ids.empty()) out.latent = ag::segment_mean(f_c, labels, out.latent_ids);
  return out;
}

PrototypeSet compute_prototypes(const Tensor& f_c, const LabelMap& mask, std::size_t n_seen) {
  ag::Tape tape;
  const ag::Var f = tape.constant(f_c.reshaped({f_c.rows(), f_c.cols()}));
  PrototypeSet set;
  set.n_seen = n_seen;
  set.ids = present_ids(mask.labels);
  set.prototypes = Tensor({set.ids.size(), f_c.cols()});
  if (!set.ids.empty()) set.prototypes = ag::segment_mean(f, mask.labels, set.ids).value();
  return set;
}

std::pair<PrototypeGroup, PrototypeGroup> split_prototypes(const PrototypeSet& p) {
  const std::size_t d = p.prototypes.cols();
  PrototypeGroup seen, latent;
  std::vector<double> sv, lv;
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    const bool is_seen = p.ids[i] < static_cast<int>(p.n_seen);
    (is_seen ? seen.ids : latent.ids).push_back(p.ids[i]);
    auto row = p.prototypes.row(i);
    (is_seen ? sv : lv).insert((is_seen ? sv : lv).end(), row.begin(), row.end());
  }
  seen.prototypes = Tensor({seen.ids.size(), d}, std::move(sv));
  latent.prototypes = Tensor({latent.ids.size(), d}, std::move(lv));
  return {std::move(seen), std::move(latent)};
}

ag::Var kl_divergence_logits(const ag::Var& p_logits, const ag::Var& q_logits) {
  const std::size_t m = p_logits.value().numel();
  if (q_logits.value().numel() != m) throw std::invalid_argument("kl: length mismatch");
  auto log_softmax = [m](const Tensor& x) {
    std::vector<double> out(m);
    const double mx = *std::max_element(x.values().begin(), x.values().end());
    double z = 0.0;
    for (std::size_t i = 0; i < m; ++i) z += std::exp(x[i] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < m; ++i) out[i] = x[i] - lse;
    return out;
  };
  const std::vector<double> lp = log_softmax(p_logits.value());
  const std::vector<double> lq = log_softmax(q_logits.value());
  double kl = 0.0;
  for (std::size_t i = 0; i < m; ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  const ag::Var inputs[] = {p_logits, q_logits};
  return p_logits.tape().record(
      Tensor({1}, kl), inputs, [p_logits, q_logits, lp, lq, kl, m](ag::Tape& t, const Tensor& g) {
        if (p_logits.requires_grad()) {
          Tensor& gp = t.grad_buffer(p_logits);
          for (std::size_t i = 0; i < m; ++i)
            gp[i] += g[0] * std::exp(lp[i]) * ((lp[i] - lq[i]) - kl);
        }
        if (q_logits.requires_grad()) {
          Tensor& gq = t.grad_buffer(q_logits);
          for (std::size_t i = 0; i < m; ++i) gq[i] += g[0] * (std::exp(lq[i]) - std::exp(lp[i]));
        }
      });
}

ag::Var sam_loss(const ag::Var& f_l_s, const ag::Var& a_s_present, const ag::Var& c_g,
                 double tau_f, double tau_c) {
  if (!(tau_f > 0.0) || !(tau_c > 0.0)) throw std::invalid_argument("sam_loss: temperatures must be positive");
  if (f_l_s.rows() == 0) throw std::invalid_argument("sam_loss: no seen prototypes");
  if (a_s_present.value().shape() != f_l_s.value().shape()) {
    throw std::invalid_argument("sam_loss: prototype/embedding shape mismatch " +
                                shape_to_string(f_l_s.value().shape()) + " vs " +
                                shape_to_string(a_s_present.value().shape()));
  }
  const std::size_t d = f_l_s.cols();
  const ag::Var c_row = c_g.value().dim() == 2 ? c_g : ag::reshape(c_g, {1, d});
  const ag::Var p = ag::scale(ag::matmul_nt(f_l_s, c_row), 1.0 / tau_f);
  const ag::Var q = ag::scale(ag::matmul_nt(a_s_present, c_row), 1.0 / tau_c);
  return kl_divergence_logits(p, q);
}

double sam_loss(const Tensor& f_l_s, const Tensor& a_s_present, const Tensor& c_g, double tau_f,
                double tau_c) {
  ag::Tape tape;
  return sam_loss(tape.constant(f_l_s), tape.constant(a_s_present), tape.constant(c_g), tau_f,
                  tau_c)
      .value()[0];
}

}  // namespace chimera
