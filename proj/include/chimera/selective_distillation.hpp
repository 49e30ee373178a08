// SPDX-License-Identifier: Apache-2.0
#pragma once

// Selective global distillation: score dense features against the image CLS
// token, pick K positions through Gumbel-perturbed ranking, pool them with a
// softmax over their scores and pull the pooled feature toward its own CLS
// token with a batch InfoNCE loss.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chimera/autograd.hpp"
#include "chimera/tensor.hpp"

namespace chimera {

using Rng = std::mt19937_64;

inline constexpr double kDefaultTau = 0.07;

enum class DecayMode { kDecrease, kIncrease, kNone };

DecayMode parse_decay_mode(const std::string& s);
std::string to_string(DecayMode m);

struct DecaySchedule {
  double k0 = 9000.0;
  double rate = 0.1;
  std::size_t k_min = 1;
  DecayMode mode = DecayMode::kDecrease;
};

struct SelectionResult {
  std::vector<std::size_t> indices;  // K distinct flat positions
  Tensor f_k;                        // [K, d_emb]
  Tensor weights;                    // [K], softmax of the selected scores
};

/// s_i = <f_i, c_g> / sqrt(d_emb). f_c is [..., d_emb]; result is [rows].
Tensor similarity_scores(const Tensor& f_c, const Tensor& c_g);
ag::Var similarity_scores(const ag::Var& f_c, const ag::Var& c_g);

/// Gumbel perturbation g = -log(-log(u)), u ~ U(0,1) open interval.
double sample_gumbel(Rng& rng);

/// Indices of the k best positions. With noise, positions are ranked by
/// s_i + g_i (the softmax over (s+g)/tau is monotone in that quantity);
/// without noise by s_i. Ties go to the lower index.
std::vector<std::size_t> gumbel_topk(std::span<const double> scores, std::size_t k, double tau,
                                     Rng& rng, bool noise);

/// Same selection, also returning the sampling weights softmax((s+g)/tau)
/// over all positions.
std::vector<std::size_t> gumbel_topk(std::span<const double> scores, std::size_t k, double tau,
                                     Rng& rng, bool noise, std::vector<double>& weights_out);

struct AggregateVars {
  ag::Var w_prime;  // [K, 1]
  ag::Var f_g;      // [1, d_emb]
};

/// w' = softmax(f_k c_g / sqrt(d)), f_g = sum_k w'_k f_k.
AggregateVars aggregate_global(const ag::Var& f_k, const ag::Var& c_g);
std::pair<Tensor, Tensor> aggregate_global(const Tensor& f_k, const Tensor& c_g);

/// Scores, selects and aggregates one image: f_c [P, d_emb], c_g [d_emb].
SelectionResult select_and_aggregate(const Tensor& f_c, const Tensor& c_g, std::size_t k,
                                     double tau, Rng& rng, bool noise, Tensor* f_g_out = nullptr);

/// Batch InfoNCE: mean_i -log softmax_j(<f_g_i, c_g_j> / tau)[i].
ag::Var sgd_loss(const ag::Var& f_g, const ag::Var& c_g, double tau);
double sgd_loss(const Tensor& f_g, const Tensor& c_g, double tau);

/// Number of positions to select at `iteration`, clamped to [k_min, capacity].
std::size_t decayed_k(std::int64_t iteration, const DecaySchedule& sched, std::size_t capacity);

}  // namespace chimera
