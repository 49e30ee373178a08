// SPDX-License-Identifier: Apache-2.0
#include "chimera/selective_distillation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace chimera {

DecayMode parse_decay_mode(const std::string& s) {
  if (s == "decrease") return DecayMode::kDecrease;
  if (s == "increase") return DecayMode::kIncrease;
  if (s == "none") return DecayMode::kNone;
  throw std::invalid_argument("unknown decay mode '" + s + "' (expected decrease, increase or none)");
}

std::string to_string(DecayMode m) {
  switch (m) {
    case DecayMode::kDecrease: return "decrease";
    case DecayMode::kIncrease: return "increase";
    case DecayMode::kNone: return "none";
  }
  return "?";
}

ag::Var similarity_scores(const ag::Var& f_c, const ag::Var& c_g) {
  const std::size_t d = f_c.cols();
  if (c_g.value().numel() != d) {
    throw std::invalid_argument("similarity_scores: feature width " + std::to_string(d) +
                                " != CLS width " + std::to_string(c_g.value().numel()));
  }
  const ag::Var c_row = c_g.value().dim() == 2 ? c_g : ag::reshape(c_g, {1, d});
  return ag::scale(ag::matmul_nt(f_c, c_row), 1.0 / std::sqrt(static_cast<double>(d)));
}

Tensor similarity_scores(const Tensor& f_c, const Tensor& c_g) {
  ag::Tape tape;
  const ag::Var s = similarity_scores(tape.constant(f_c.reshaped({f_c.rows(), f_c.cols()})),
                                      tape.constant(c_g));
  return s.value().reshaped({f_c.rows()});
}

double sample_gumbel(Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  while (u <= 0.0) u = unif(rng);
  return -std::log(-std::log(u));
}

std::vector<std::size_t> gumbel_topk(std::span<const double> scores, std::size_t k, double tau,
                                     Rng& rng, bool noise, std::vector<double>& weights_out) {
  const std::size_t n = scores.size();
  if (k < 1 || k > n) {
    throw std::invalid_argument("gumbel_topk: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_topk: tau must be positive");
  std::vector<double> key(scores.begin(), scores.end());
  if (noise) {
    for (double& v : key) v += sample_gumbel(rng);
  }
  weights_out.resize(n);
  const double m = *std::max_element(key.begin(), key.end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += (weights_out[i] = std::exp((key[i] - m) / tau));
  for (double& w : weights_out) w /= z;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return key[a] > key[b] || (key[a] == key[b] && a < b);
                    });
  order.resize(k);
  return order;
}

std::vector<std::size_t> gumbel_topk(std::span<const double> scores, std::size_t k, double tau,
                                     Rng& rng, bool noise) {
  std::vector<double> weights;
  return gumbel_topk(scores, k, tau, rng, noise, weights);
}

AggregateVars aggregate_global(const ag::Var& f_k, const ag::Var& c_g) {
  if (f_k.rows() == 0) throw std::invalid_argument("aggregate_global: empty selection");
  const ag::Var s = similarity_scores(f_k, c_g);                         // [K, 1]
  const ag::Var w = ag::reshape(ag::softmax_rows(ag::reshape(s, {1, f_k.rows()})), {f_k.rows(), 1});
  const ag::Var f_g = ag::matmul(ag::reshape(w, {1, f_k.rows()}), f_k);  // [1, d]
  return {w, f_g};
}

std::pair<Tensor, Tensor> aggregate_global(const Tensor& f_k, const Tensor& c_g) {
  ag::Tape tape;
  const AggregateVars a = aggregate_global(tape.constant(f_k), tape.constant(c_g));
  return {a.w_prime.value().reshaped({f_k.rows()}), a.f_g.value().reshaped({f_k.cols()})};
}

SelectionResult select_and_aggregate(const Tensor& f_c, const Tensor& c_g, std::size_t k,
                                     double tau, Rng& rng, bool noise, Tensor* f_g_out) {
  const Tensor flat = f_c.reshaped({f_c.rows(), f_c.cols()});
  const Tensor s = similarity_scores(flat, c_g);
  SelectionResult r;
  r.indices = gumbel_topk(s.values(), k, tau, rng, noise);
  r.f_k = Tensor({k, flat.cols()});
  for (std::size_t i = 0; i < k; ++i)
    std::copy(flat.row(r.indices[i]).begin(), flat.row(r.indices[i]).end(), r.f_k.row(i).begin());
  auto [w, f_g] = aggregate_global(r.f_k, c_g);
  r.weights = std::move(w);
  if (f_g_out) *f_g_out = std::move(f_g);
  return r;
}

ag::Var sgd_loss(const ag::Var& f_g, const ag::Var& c_g, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("sgd_loss: tau must be positive");
  if (f_g.value().shape() != c_g.value().shape() || f_g.value().dim() != 2) {
    throw std::invalid_argument("sgd_loss: batch shape mismatch " +
                                shape_to_string(f_g.value().shape()) + " vs " +
                                shape_to_string(c_g.value().shape()));
  }
  const std::size_t b = f_g.rows(), d = f_g.cols();
  if (b == 0) throw std::invalid_argument("sgd_loss: empty batch");
  const Tensor& f = f_g.value();
  const Tensor& c = c_g.value();
  // logits[i][j] = <f_i, c_j> / tau; p = row softmax.
  Tensor p({b, b});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < d; ++t) dot += f[i * d + t] * c[j * d + t];
      p[i * b + j] = dot / tau;
      m = std::max(m, p[i * b + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(p[i * b + j] - m);
    const double lse = m + std::log(z);
    loss += lse - p[i * b + i];
    for (std::size_t j = 0; j < b; ++j) p[i * b + j] = std::exp(p[i * b + j] - lse);
  }
  loss /= static_cast<double>(b);
  const ag::Var inputs[] = {f_g, c_g};
  return f_g.tape().record(
      Tensor({1}, loss), inputs, [f_g, c_g, p, b, d, tau](ag::Tape& t, const Tensor& g) {
        // dL/dlogit_ij = (p_ij - [i==j]) / b
        const double s = g[0] / (static_cast<double>(b) * tau);
        const Tensor& f = f_g.value();
        const Tensor& c = c_g.value();
        if (f_g.requires_grad()) {
          Tensor& gf = t.grad_buffer(f_g);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < b; ++j) {
              const double coef = s * (p[i * b + j] - (i == j ? 1.0 : 0.0));
              for (std::size_t k = 0; k < d; ++k) gf[i * d + k] += coef * c[j * d + k];
            }
        }
        if (c_g.requires_grad()) {
          Tensor& gc = t.grad_buffer(c_g);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < b; ++j) {
              const double coef = s * (p[i * b + j] - (i == j ? 1.0 : 0.0));
              for (std::size_t k = 0; k < d; ++k) gc[j * d + k] += coef * f[i * d + k];
            }
        }
      });
}

double sgd_loss(const Tensor& f_g, const Tensor& c_g, double tau) {
  ag::Tape tape;
  return sgd_loss(tape.constant(f_g), tape.constant(c_g), tau).value()[0];
}

std::size_t decayed_k(std::int64_t iteration, const DecaySchedule& sched, std::size_t capacity) {
  const double k_min = static_cast<double>(std::max<std::size_t>(sched.k_min, 1));
  const double cap = static_cast<double>(capacity);
  auto clamp = [&](double k, double hi) {
    hi = std::max(hi, 1.0);
    return static_cast<std::size_t>(std::clamp(k, std::min(k_min, hi), hi));
  };
  const double t = static_cast<double>(std::max<std::int64_t>(iteration, 0));
  switch (sched.mode) {
    case DecayMode::kDecrease:
      // nearbyint under the default rounding mode rounds half to even.
      return clamp(std::nearbyint(sched.k0 - sched.rate * t), std::min(sched.k0, cap));
    case DecayMode::kIncrease:
      return clamp(std::nearbyint(sched.k0 + sched.rate * t), cap);
    case DecayMode::kNone:
      return clamp(std::nearbyint(sched.k0), std::min(sched.k0, cap));
  }
  return 1;
}

}  // namespace chimera
