// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal tape-based reverse-mode differentiation over row-major matrices.
//
// Every op works on tensors viewed as matrices (rows x last axis). Dense
// feature maps travel through the tape flattened to [H*W, C]; the spatial
// extent is carried alongside by the caller.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "chimera/tensor.hpp"

namespace chimera::ag {

class Tape;

class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::move(value), true); }

  /// Records an op result. `fn` is dropped when no input requires a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient accumulated for `v`; zero-filled if nothing reached it.
  Tensor grad(const Var& v) const;

  /// Accumulation buffer for op authors; allocated on first use.
  Tensor& grad_buffer(const Var& v);

  /// Seeds d(root)=1 and runs every recorded backward in reverse order.
  /// `root` must hold a single element.
  void backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& a);

// Broadcast a vector of length cols(a) over every row.
Var add_rowvec(const Var& a, const Var& v);
Var mul_rowvec(const Var& a, const Var& v);

// Matrix products: a[n,k]·b[k,m] and a[n,k]·b[m,k]^T.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);

/// y = x·W + b with W [in, out]; `bias` may be invalid (no bias).
Var linear(const Var& x, const Var& weight, const Var& bias);

// Normalizations without affine parameters.
/// Each row to zero mean / unit variance (biased variance).
Var normalize_rows(const Var& a, double eps);
/// Each column over all rows (train-mode batch normalization).
Var normalize_cols(const Var& a, double eps);
/// Group normalization: rows are split into consecutive segments (one per
/// image); inside each segment the columns are split into `groups` equal
/// groups, each normalized over (segment rows x group columns).
Var normalize_groups(const Var& a, std::span<const std::size_t> segment_rows,
                     std::size_t groups, double eps);

/// 3x3 convolution, zero padding 1. x is [height*width, c_in] (row-major
/// spatial), weight is [9*c_in, c_out] with row index (ky*3+kx)*c_in+ci.
/// Output is [out_h*out_w, c_out] with out_h = (height-1)/stride+1.
Var conv3x3(const Var& x, std::size_t height, std::size_t width, const Var& weight,
            const Var& bias, std::size_t stride);

// Row/column plumbing
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var gather_rows(const Var& a, std::span<const std::size_t> indices);
Var reshape(const Var& a, Shape shape);

Var softmax_rows(const Var& a);

/// out[j] = mean of rows i with labels[i] == ids[j]. Every id must occur.
Var segment_mean(const Var& a, std::span<const int> labels, std::span<const int> ids);

Var sum(const Var& a);
Var mean(const Var& a);

// Value helpers shared by ops and callers.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace chimera::ag
