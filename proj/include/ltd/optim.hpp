// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ltd/tensor.hpp"

namespace ltd {

// Named trainable tensors in registration order. Order is part of the
// checkpoint layout, so it must not depend on hashing.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;

  // Allocates and clears every gradient buffer.
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

struct AdamWOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  AdamWOptions options;
  std::int64_t step = 0;
  std::unordered_map<std::string, std::vector<double>> first_moment;
  std::unordered_map<std::string, std::vector<double>> second_moment;
};

// Adam with decoupled weight decay: p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε).
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {});

  // Throws std::logic_error when a parameter has no gradient buffer.
  void step(ParameterStore& params);

  AdamWState& state() { return state_; }
  const AdamWState& state() const { return state_; }

 private:
  AdamWState state_;
};

}  // namespace ltd
