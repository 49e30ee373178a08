// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chimera/autograd.hpp"

namespace chimera {

/// Places named tensors on a tape, remembering each binding so gradients
/// can be read back by name after backward().
class ParamBinder {
 public:
  ParamBinder(ag::Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  ag::Var operator()(const std::string& name, const Tensor& value) {
    ag::Var v = tape_->leaf(value, trainable_);
    bound_.emplace_back(name, v);
    return v;
  }

  ag::Tape& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }
  const std::vector<std::pair<std::string, ag::Var>>& bound() const { return bound_; }

 private:
  ag::Tape* tape_;
  bool trainable_;
  std::vector<std::pair<std::string, ag::Var>> bound_;
};

}  // namespace chimera
