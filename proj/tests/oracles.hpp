// SPDX-License-Identifier: Apache-2.0
#pragma once

// Brute-force reference implementations. Each works on raw loops over the
// tensor storage and shares no code with the library beyond the Tensor
// container.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "chimera/tensor.hpp"

namespace oracle {

using chimera::Tensor;
using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const Tensor& t) {
  const std::size_t c = t.shape().back();
  const std::size_t r = t.numel() / c;
  Mat m(r, Vec(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
  return m;
}

inline Vec to_vec(const Tensor& t) { return Vec(t.data(), t.data() + t.numel()); }

inline double dot(const Vec& a, const Vec& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

inline Vec softmax(const Vec& x) {
  long double z = 0.0L;
  std::vector<long double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(static_cast<long double>(x[i])));
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / z);
  return out;
}

inline Vec similarity(const Tensor& f, const Tensor& c) {
  const Mat m = to_mat(f);
  const Vec cv = to_vec(c);
  Vec s;
  for (const auto& row : m) s.push_back(dot(row, cv) / std::sqrt(static_cast<double>(cv.size())));
  return s;
}

/// Accumulate-then-divide per label, ignoring 255.
inline std::map<int, Vec> prototypes(const Tensor& f, const std::vector<int>& labels) {
  const Mat m = to_mat(f);
  std::map<int, Vec> sum;
  std::map<int, double> count;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 255) continue;
    auto& s = sum[labels[i]];
    if (s.empty()) s.assign(m[i].size(), 0.0);
    for (std::size_t j = 0; j < m[i].size(); ++j) s[j] += m[i][j];
    count[labels[i]] += 1.0;
  }
  for (auto& [id, s] : sum)
    for (double& v : s) v /= count[id];
  return sum;
}

inline Mat logits(const Tensor& f, const Tensor& classifier) {
  const Mat fm = to_mat(f), cm = to_mat(classifier);
  Mat out(fm.size(), Vec(cm.size()));
  for (std::size_t i = 0; i < fm.size(); ++i)
    for (std::size_t k = 0; k < cm.size(); ++k) out[i][k] = dot(fm[i], cm[k]);
  return out;
}

/// Mean over i of -log(exp(<f_i,c_i>/tau) / sum_j exp(<f_i,c_j>/tau)).
inline double infonce(const Tensor& f, const Tensor& c, double tau) {
  const Mat fm = to_mat(f), cm = to_mat(c);
  long double total = 0.0L;
  for (std::size_t i = 0; i < fm.size(); ++i) {
    long double denom = 0.0L;
    for (std::size_t j = 0; j < cm.size(); ++j) denom += std::exp(static_cast<long double>(dot(fm[i], cm[j]) / tau));
    total += -std::log(std::exp(static_cast<long double>(dot(fm[i], cm[i]) / tau)) / denom);
  }
  return static_cast<double>(total / static_cast<long double>(fm.size()));
}

/// sum p log(p/q) with p = softmax(x), q = softmax(y).
inline double kl(const Vec& x, const Vec& y) {
  const Vec p = softmax(x), q = softmax(y);
  long double s = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += static_cast<long double>(p[i]) * std::log(static_cast<long double>(p[i]) / q[i]);
  return static_cast<double>(s);
}

inline double sam(const Tensor& f_s, const Tensor& a_s, const Tensor& c_g, double tau_f, double tau_c) {
  const Mat fm = to_mat(f_s), am = to_mat(a_s);
  const Vec c = to_vec(c_g);
  Vec x, y;
  for (std::size_t i = 0; i < fm.size(); ++i) {
    x.push_back(dot(fm[i], c) / tau_f);
    y.push_back(dot(am[i], c) / tau_c);
  }
  return kl(x, y);
}

/// Cross-entropy plus alpha-weighted focal term for one pixel.
inline double ce_focal(const Vec& z, int label, double gamma, double alpha) {
  const Vec p = softmax(z);
  const double pt = p[static_cast<std::size_t>(label)];
  return -std::log(pt) - alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
}

/// Linear CKA through HSIC with explicit Gram matrices and centering matrix.
inline double cka_hsic(const Tensor& x, const Tensor& y) {
  const Mat xm = to_mat(x), ym = to_mat(y);
  const std::size_t n = xm.size();
  auto gram = [n](const Mat& m) {
    Mat g(n, Vec(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i][j] = dot(m[i], m[j]);
    return g;
  };
  Mat h(n, Vec(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h[i][j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
  auto mul = [n](const Mat& a, const Mat& b) {
    Mat c(n, Vec(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
  };
  auto hsic = [&](const Mat& k, const Mat& l) {
    const Mat m = mul(mul(mul(k, h), l), h);
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) tr += m[i][i];
    return tr;
  };
  const Mat k = gram(xm), l = gram(ym);
  const double kk = hsic(k, k), ll = hsic(l, l);
  if (kk == 0.0 || ll == 0.0) return 0.0;
  return hsic(k, l) / std::sqrt(kk * ll);
}

/// Lloyd's algorithm to a fixed point from the given centroids.
inline std::vector<int> lloyd(const Mat& pts, Mat centroids) {
  std::vector<int> assign(pts.size(), -1);
  for (int iter = 0; iter < 1000; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < centroids.size(); ++c) {
        double d = 0.0;
        for (std::size_t j = 0; j < pts[i].size(); ++j) d += (pts[i][j] - centroids[c][j]) * (pts[i][j] - centroids[c][j]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      if (assign[i] != best) changed = true;
      assign[i] = best;
    }
    if (!changed) break;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      Vec s(pts[0].size(), 0.0);
      double n = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i)
        if (assign[i] == static_cast<int>(c)) {
          for (std::size_t j = 0; j < s.size(); ++j) s[j] += pts[i][j];
          n += 1.0;
        }
      if (n > 0.0)
        for (std::size_t j = 0; j < s.size(); ++j) centroids[c][j] = s[j] / n;
    }
  }
  return assign;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Per-row layer norm with biased variance.
inline Vec layer_norm(const Vec& x, const Vec& scale, const Vec& bias, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * scale[i] + bias[i];
  return out;
}

/// y = x W + b with W stored row-major [in, out].
inline Vec affine(const Vec& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  Vec y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    long double s = b.numel() ? b.data()[o] : 0.0;
    for (std::size_t i = 0; i < in; ++i) s += static_cast<long double>(x[i]) * w.data()[i * out + o];
    y[o] = static_cast<double>(s);
  }
  return y;
}

/// Upper tail of the chi-square distribution with 3 degrees of freedom.
inline double chi2_sf_df3(double x) {
  return std::erfc(std::sqrt(x / 2.0)) + std::sqrt(2.0 * x / M_PI) * std::exp(-x / 2.0);
}

}  // namespace oracle
