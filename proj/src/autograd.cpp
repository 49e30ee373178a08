// SPDX-License-Identifier: Apache-2.0
#include "chimera/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace chimera::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t) {
  return ConstMapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
MapMat as_matrix(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("vars live on different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require_same_tape(a, b);
  if (a.value().shape() != b.value().shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.value().shape()) + " vs " +
                                shape_to_string(b.value().shape()));
  }
}

void accumulate(Tape& tape, const Var& v, const Tensor& g) {
  if (!v.requires_grad()) return;
  Tensor& buf = tape.grad_buffer(v);
  for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.valid() && in.requires_grad()) needs = true;
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, false,
                        needs ? std::move(fn) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor::zeros(n.value.shape());
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (value(root).numel() != 1) throw std::invalid_argument("backward root must be scalar");
  if (!requires_grad(root)) return;
  grad_buffer(root)[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    if (b.requires_grad()) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = t.grad_buffer(a);
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_buffer(b);
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
  });
}

Var gelu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = gelu_value(v);
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * gelu_derivative(x[i]);
  });
}

Var add_rowvec(const Var& a, const Var& v) {
  require_same_tape(a, v);
  const std::size_t n = a.rows(), c = a.cols();
  if (v.value().numel() != c) throw std::invalid_argument("add_rowvec: width mismatch");
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += v.value()[j];
  Var inputs[] = {a, v};
  return a.tape().record(std::move(out), inputs, [a, v, n, c](Tape& t, const Tensor& g) {
    accumulate(t, a, g);
    if (v.requires_grad()) {
      Tensor& gv = t.grad_buffer(v);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j];
    }
  });
}

Var mul_rowvec(const Var& a, const Var& v) {
  require_same_tape(a, v);
  const std::size_t n = a.rows(), c = a.cols();
  if (v.value().numel() != c) throw std::invalid_argument("mul_rowvec: width mismatch");
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] *= v.value()[j];
  Var inputs[] = {a, v};
  return a.tape().record(std::move(out), inputs, [a, v, n, c](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * c + j] * v.value()[j];
    }
    if (v.requires_grad()) {
      Tensor& gv = t.grad_buffer(v);
      const Tensor& av = a.value();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j] * av[r * c + j];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch " +
                                shape_to_string(a.value().shape()) + " x " +
                                shape_to_string(b.value().shape()));
  }
  Tensor out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = t.grad_buffer(a);
      as_matrix(ga).noalias() += as_matrix(g) * as_matrix(b.value()).transpose();
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_buffer(b);
      as_matrix(gb).noalias() += as_matrix(a.value()).transpose() * as_matrix(g);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: width mismatch " +
                                shape_to_string(a.value().shape()) + " vs " +
                                shape_to_string(b.value().shape()));
  }
  Tensor out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value()).transpose();
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = t.grad_buffer(a);
      as_matrix(ga).noalias() += as_matrix(g) * as_matrix(b.value());
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_buffer(b);
      as_matrix(gb).noalias() += as_matrix(g).transpose() * as_matrix(a.value());
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul(x, weight);
  return bias.valid() ? add_rowvec(y, bias) : y;
}

namespace {

// Normalizes the index set `idx` of x into y and returns 1/sigma.
double normalize_set(const Tensor& x, Tensor& y, std::span<const std::size_t> idx, double eps) {
  double m = 0.0;
  for (std::size_t i : idx) m += x[i];
  m /= static_cast<double>(idx.size());
  double var = 0.0;
  for (std::size_t i : idx) var += (x[i] - m) * (x[i] - m);
  var /= static_cast<double>(idx.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i : idx) y[i] = (x[i] - m) * inv;
  return inv;
}

// dx = inv * (dy - mean(dy) - y * mean(dy*y)) over the set.
void normalize_set_backward(const Tensor& y, const Tensor& dy, Tensor& dx,
                            std::span<const std::size_t> idx, double inv) {
  double mdy = 0.0, mdyy = 0.0;
  for (std::size_t i : idx) {
    mdy += dy[i];
    mdyy += dy[i] * y[i];
  }
  const double n = static_cast<double>(idx.size());
  mdy /= n;
  mdyy /= n;
  for (std::size_t i : idx) dx[i] += inv * (dy[i] - mdy - y[i] * mdyy);
}

Var normalize_sets(const Var& a, std::vector<std::vector<std::size_t>> sets, double eps) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  std::vector<double> inv(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) inv[s] = normalize_set(x, y, sets[s], eps);
  Var inputs[] = {a};
  Tensor y_copy = y;
  return a.tape().record(
      std::move(y), inputs,
      [a, sets = std::move(sets), inv = std::move(inv), y = std::move(y_copy)](
          Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t s = 0; s < sets.size(); ++s)
          normalize_set_backward(y, g, ga, sets[s], inv[s]);
      });
}

}  // namespace

Var normalize_rows(const Var& a, double eps) {
  const std::size_t n = a.rows(), c = a.cols();
  std::vector<std::vector<std::size_t>> sets(n, std::vector<std::size_t>(c));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) sets[r][j] = r * c + j;
  return normalize_sets(a, std::move(sets), eps);
}

Var normalize_cols(const Var& a, double eps) {
  const std::size_t n = a.rows(), c = a.cols();
  if (n == 0) throw std::invalid_argument("normalize_cols: empty input");
  std::vector<std::vector<std::size_t>> sets(c, std::vector<std::size_t>(n));
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t r = 0; r < n; ++r) sets[j][r] = r * c + j;
  return normalize_sets(a, std::move(sets), eps);
}

Var normalize_groups(const Var& a, std::span<const std::size_t> segment_rows,
                     std::size_t groups, double eps) {
  const std::size_t n = a.rows(), c = a.cols();
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("normalize_groups: " + std::to_string(c) +
                                " channels not divisible into " + std::to_string(groups) +
                                " groups");
  }
  std::size_t total = 0;
  for (std::size_t s : segment_rows) total += s;
  if (total != n) throw std::invalid_argument("normalize_groups: segments do not cover rows");
  const std::size_t gw = c / groups;
  std::vector<std::vector<std::size_t>> sets;
  std::size_t start = 0;
  for (std::size_t seg : segment_rows) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      std::vector<std::size_t> set;
      set.reserve(seg * gw);
      for (std::size_t r = start; r < start + seg; ++r)
        for (std::size_t j = gi * gw; j < (gi + 1) * gw; ++j) set.push_back(r * c + j);
      sets.push_back(std::move(set));
    }
    start += seg;
  }
  return normalize_sets(a, std::move(sets), eps);
}

Var conv3x3(const Var& x, std::size_t height, std::size_t width, const Var& weight,
            const Var& bias, std::size_t stride) {
  require_same_tape(x, weight);
  const std::size_t c_in = x.cols();
  if (x.rows() != height * width) {
    throw std::invalid_argument("conv3x3: input rows " + std::to_string(x.rows()) +
                                " != " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (weight.rows() != 9 * c_in) throw std::invalid_argument("conv3x3: weight shape mismatch");
  if (stride == 0) throw std::invalid_argument("conv3x3: zero stride");
  const std::size_t c_out = weight.cols();
  const std::size_t oh = (height - 1) / stride + 1, ow = (width - 1) / stride + 1;
  const std::size_t patch = 9 * c_in;

  Tensor cols({oh * ow, patch});
  const Tensor& xv = x.value();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* dst = cols.data() + (oy * ow + ox) * patch;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - 1;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - 1;
          double* d = dst + (ky * 3 + kx) * c_in;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) ||
              ix >= static_cast<long>(width)) {
            std::fill(d, d + c_in, 0.0);
          } else {
            const double* s = xv.data() + (static_cast<std::size_t>(iy) * width +
                                           static_cast<std::size_t>(ix)) * c_in;
            std::copy(s, s + c_in, d);
          }
        }
      }
    }
  }
  Tensor out({oh * ow, c_out});
  as_matrix(out).noalias() = as_matrix(cols) * as_matrix(weight.value());
  if (bias.valid()) {
    for (std::size_t r = 0; r < oh * ow; ++r)
      for (std::size_t j = 0; j < c_out; ++j) out[r * c_out + j] += bias.value()[j];
  }
  std::vector<Var> inputs = {x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return x.tape().record(
      std::move(out), inputs,
      [x, weight, bias, cols = std::move(cols), height, width, stride, oh, ow, c_in, c_out](
          Tape& t, const Tensor& g) {
        if (weight.requires_grad()) {
          Tensor& gw = t.grad_buffer(weight);
          as_matrix(gw).noalias() += as_matrix(cols).transpose() * as_matrix(g);
        }
        if (bias.valid() && bias.requires_grad()) {
          Tensor& gb = t.grad_buffer(bias);
          for (std::size_t r = 0; r < oh * ow; ++r)
            for (std::size_t j = 0; j < c_out; ++j) gb[j] += g[r * c_out + j];
        }
        if (x.requires_grad()) {
          Tensor dcols({oh * ow, 9 * c_in});
          as_matrix(dcols).noalias() = as_matrix(g) * as_matrix(weight.value()).transpose();
          Tensor& gx = t.grad_buffer(x);
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double* src = dcols.data() + (oy * ow + ox) * 9 * c_in;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - 1;
                if (iy < 0 || iy >= static_cast<long>(height)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - 1;
                  if (ix < 0 || ix >= static_cast<long>(width)) continue;
                  double* d = gx.data() + (static_cast<std::size_t>(iy) * width +
                                           static_cast<std::size_t>(ix)) * c_in;
                  const double* s = src + (ky * 3 + kx) * c_in;
                  for (std::size_t ci = 0; ci < c_in; ++ci) d[ci] += s[ci];
                }
              }
            }
          }
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.cols() != c) throw std::invalid_argument("concat_rows: width mismatch");
    n += p.rows();
  }
  Tensor out({n, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().numel(), out.data() + off);
    off += p.value().numel();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), inputs, [inputs](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t m = p.value().numel();
      if (p.requires_grad()) {
        Tensor& gp = t.grad_buffer(p);
        for (std::size_t i = 0; i < m; ++i) gp[i] += g[off + i];
      }
      off += m;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
  }
  Tensor out({n, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < pc; ++j) out[r * c + off + j] = p.value()[r * pc + j];
    off += pc;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), inputs, [inputs, n, c](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t pc = p.cols();
      if (p.requires_grad()) {
        Tensor& gp = t.grad_buffer(p);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < pc; ++j) gp[r * pc + j] += g[r * c + off + j];
      }
      off += pc;
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const std::size_t c = a.cols();
  if (begin > end || end > a.rows()) throw std::out_of_range("slice_rows: bad range");
  Tensor out({end - begin, c});
  std::copy(a.value().data() + begin * c, a.value().data() + end * c, out.data());
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, begin, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[begin * c + i] += g[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const std::size_t n = a.rows(), c = a.cols();
  if (begin > end || end > c) throw std::out_of_range("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out({n, w});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = a.value()[r * c + begin + j];
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, begin, n, c, w](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) ga[r * c + begin + j] += g[r * w + j];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> indices) {
  const std::size_t c = a.cols();
  Tensor out({indices.size(), c});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy(a.value().data() + indices[k] * c, a.value().data() + (indices[k] + 1) * c,
              out.data() + k * c);
  }
  Var inputs[] = {a};
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return a.tape().record(std::move(out), inputs, [a, idx, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) ga[idx[k] * c + j] += g[k * c + j];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs,
                         [a](Tape& t, const Tensor& g) { accumulate(t, a, g); });
}

Var softmax_rows(const Var& a) {
  const std::size_t n = a.rows(), c = a.cols();
  Tensor out(a.value().shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = a.value().data() + r * c;
    double* y = out.data() + r * c;
    const double m = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  Var inputs[] = {a};
  Tensor y_copy = out;
  return a.tape().record(std::move(out), inputs,
                         [a, n, c, y = std::move(y_copy)](Tape& t, const Tensor& g) {
                           Tensor& ga = t.grad_buffer(a);
                           for (std::size_t r = 0; r < n; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               ga[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                           }
                         });
}

Var segment_mean(const Var& a, std::span<const int> labels, std::span<const int> ids) {
  const std::size_t n = a.rows(), c = a.cols();
  if (labels.size() != n) throw std::invalid_argument("segment_mean: label count mismatch");
  std::unordered_map<int, std::size_t> slot;
  for (std::size_t j = 0; j < ids.size(); ++j) slot[ids[j]] = j;
  std::vector<double> count(ids.size(), 0.0);
  Tensor out({ids.size(), c});
  for (std::size_t r = 0; r < n; ++r) {
    auto it = slot.find(labels[r]);
    if (it == slot.end()) continue;
    const std::size_t k = it->second;
    count[k] += 1.0;
    // Running mean; exact for constant segments.
    for (std::size_t j = 0; j < c; ++j) out[k * c + j] += (a.value()[r * c + j] - out[k * c + j]) / count[k];
  }
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (count[k] == 0.0) {
      throw std::invalid_argument("segment_mean: id " + std::to_string(ids[k]) + " is empty");
    }
  }
  Var inputs[] = {a};
  std::vector<int> lab(labels.begin(), labels.end());
  return a.tape().record(
      std::move(out), inputs,
      [a, lab = std::move(lab), slot = std::move(slot), count = std::move(count), c](
          Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t r = 0; r < lab.size(); ++r) {
          auto it = slot.find(lab[r]);
          if (it == slot.end()) continue;
          const std::size_t k = it->second;
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[k * c + j] / count[k];
        }
      });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Var inputs[] = {a};
  return a.tape().record(Tensor({1}, s), inputs, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (double& v : ga.storage()) v += g[0];
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

}  // namespace chimera::ag
