// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bipartite matching between prediction slots and ground-truth instances,
// and the set loss L = k_C·L_C + k_B·L_B + k_I·L_I.

#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ltd/model.hpp"
#include "ltd/optim.hpp"

namespace ltd {

using Box = std::array<double, 4>;  // normalized (cx, cy, w, h)

struct GroundTruthSet {
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::vector<int> target_indices;

  std::size_t size() const { return boxes.size(); }
  // Throws std::invalid_argument when the fields disagree or a box is invalid.
  void validate() const;
};

struct LossWeights {
  double class_weight = 1.0;   // k_C
  double box_weight = 5.0;     // k_B
  double index_weight = 1.0;   // k_I
  double no_object_weight = 0.1;

  void validate() const;
};

// Dense row-major matrix of matching costs, slots × ground truths.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct MatchAssignment {
  // (prediction slot, gt index), ordered by gt index.
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;
};

class MatchingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// cost(i, j) = k_C·(1 − p_class_i(c_j)) + k_B·‖b_i − b_j‖₁ + k_I·(1 − p_index_i(e_j))
CostMatrix pairwise_cost(const DetectionSet& pred, const GroundTruthSet& gt, const LossWeights& w);

// Minimum-cost assignment of every column to a distinct row (rows ≥ cols).
// total_cost is the sum of the chosen entries in column order.
MatchAssignment hungarian(const CostMatrix& cost);

// Injective over slots and covering every gt exactly once.
void validate_assignment(const MatchAssignment& assignment, std::size_t slots, std::size_t gt_count);

struct SetLoss {
  Tensor total;
  double class_loss = 0.0;
  double box_loss = 0.0;
  double index_loss = 0.0;
};

// L_C: weighted mean cross-entropy over all slots; matched slots target their
// gt class with weight 1, the rest target no-object with no_object_weight.
// L_B: mean over matched pairs of the L1 distance between boxes.
// L_I: mean cross-entropy over all slots; unmatched slots target no-target.
SetLoss set_loss(const DetectionSet& pred, const GroundTruthSet& gt, const MatchAssignment& assignment,
                 const LossWeights& w);

struct TrainingExample {
  const Image* image = nullptr;
  TokenSequence tokens;
  GroundTruthSet targets;
};

struct TrainStepResult {
  double loss = 0.0;
  double class_loss = 0.0;
  double box_loss = 0.0;
  double index_loss = 0.0;
  double grad_norm = 0.0;
  std::size_t matched = 0;
};

// Batch-mean loss with matching recomputed from the current predictions.
// When `assignments` is non-empty it supplies the matching instead, one per
// example. Must run under an active tape to produce gradients.
struct BatchLoss {
  Tensor total;
  TrainStepResult terms;
  std::vector<MatchAssignment> assignments;
};
BatchLoss batch_loss(const Model& model, std::span<const TrainingExample> batch, const LossWeights& w,
                     std::span<const MatchAssignment> assignments = {});

struct TrainerOptions {
  AdamWOptions optimizer;
  double grad_clip = 0.1;  // global L2 norm, <= 0 disables
};

class Trainer {
 public:
  Trainer(Model& model, LossWeights weights, TrainerOptions options);

  // forward → match → loss → backward → AdamW. Returns the pre-step loss.
  TrainStepResult step(std::span<const TrainingExample> batch);

  AdamW& optimizer() { return optimizer_; }
  const LossWeights& weights() const { return weights_; }

 private:
  Model& model_;
  LossWeights weights_;
  TrainerOptions options_;
  AdamW optimizer_;
};

}  // namespace ltd
