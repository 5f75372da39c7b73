// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ltd {

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("ParameterStore: duplicate parameter " + name);
  value.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
  return entries_[it->second].second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
  return entries_[it->second].second;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) {
    auto g = t.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.entries()) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (auto& [name, t] : params.entries()) {
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

AdamW::AdamW(AdamWOptions options) { state_.options = options; }

void AdamW::step(ParameterStore& params) {
  const AdamWOptions& o = state_.options;
  for (auto& [name, t] : params.entries()) {
    if (!t.has_grad()) throw std::logic_error("AdamW: parameter " + name + " has no gradient");
  }
  ++state_.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state_.step));
  for (auto& [name, t] : params.entries()) {
    auto& m = state_.first_moment[name];
    auto& v = state_.second_moment[name];
    if (m.empty()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    if (m.size() != t.numel()) throw std::logic_error("AdamW: moment buffer size mismatch for " + name);
    auto p = t.mutable_data();
    const auto g = t.grad();
    const double decay = 1.0 - o.learning_rate * o.weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = p[i] * decay - o.learning_rate * mhat / (std::sqrt(vhat) + o.epsilon);
    }
  }
}

}  // namespace ltd
