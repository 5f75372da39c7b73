// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ltd {

namespace {

// Row-wise softmax of a logits matrix, without recording.
std::vector<double> row_softmax(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> p(logits.data().begin(), logits.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = p.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  return p;
}

}  // namespace

void GroundTruthSet::validate() const {
  if (class_ids.size() != boxes.size() || target_indices.size() != boxes.size()) {
    throw std::invalid_argument("GroundTruthSet: boxes, class_ids and target_indices differ in length");
  }
  for (const Box& b : boxes) {
    for (double v : b) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("GroundTruthSet: box coordinate outside [0, 1]");
    }
    if (!(b[2] > 0.0 && b[3] > 0.0)) throw std::invalid_argument("GroundTruthSet: box with non-positive size");
  }
}

void LossWeights::validate() const {
  if (class_weight < 0.0 || box_weight < 0.0 || index_weight < 0.0) {
    throw std::invalid_argument("LossWeights: coefficients must be non-negative");
  }
  if (class_weight == 0.0 && box_weight == 0.0 && index_weight == 0.0) {
    throw std::invalid_argument("LossWeights: at least one coefficient must be positive");
  }
  if (!(no_object_weight > 0.0 && no_object_weight <= 1.0)) {
    throw std::invalid_argument("LossWeights: no_object_weight must lie in (0, 1]");
  }
}

CostMatrix pairwise_cost(const DetectionSet& pred, const GroundTruthSet& gt, const LossWeights& w) {
  gt.validate();
  if (gt.size() == 0) throw MatchingError("pairwise_cost: no ground truth");
  const std::size_t n = pred.size();
  const std::size_t classes = pred.class_logits.dim(1);
  const std::size_t indices = pred.target_index_logits.dim(1);
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (gt.class_ids[j] < 0 || static_cast<std::size_t>(gt.class_ids[j]) + 1 >= classes) {
      throw MatchingError("pairwise_cost: class id " + std::to_string(gt.class_ids[j]) + " outside head range");
    }
    if (gt.target_indices[j] < 0 || static_cast<std::size_t>(gt.target_indices[j]) + 1 >= indices) {
      throw MatchingError("pairwise_cost: target index " + std::to_string(gt.target_indices[j]) +
                          " outside head range");
    }
  }
  const std::vector<double> class_prob = row_softmax(pred.class_logits);
  const std::vector<double> index_prob = row_softmax(pred.target_index_logits);
  const auto boxes = pred.boxes.data();

  CostMatrix cost{n, gt.size(), std::vector<double>(n * gt.size())};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      double box_l1 = 0.0;
      for (std::size_t c = 0; c < 4; ++c) box_l1 += std::abs(boxes[i * 4 + c] - gt.boxes[j][c]);
      const double p_class = class_prob[i * classes + static_cast<std::size_t>(gt.class_ids[j])];
      const double p_index = index_prob[i * indices + static_cast<std::size_t>(gt.target_indices[j])];
      cost(i, j) = w.class_weight * (1.0 - p_class) + w.box_weight * box_l1 + w.index_weight * (1.0 - p_index);
    }
  }
  return cost;
}

MatchAssignment hungarian(const CostMatrix& cost) {
  const std::size_t slots = cost.rows, gts = cost.cols;
  if (cost.values.size() != slots * gts) throw MatchingError("hungarian: malformed cost matrix");
  if (gts > slots) throw MatchingError("hungarian: more ground truths than prediction slots");
  for (double v : cost.values) {
    if (!std::isfinite(v)) throw MatchingError("hungarian: non-finite cost");
  }
  MatchAssignment result;
  if (gts == 0) return result;

  // Shortest augmenting paths with potentials. Ground truths play the role of
  // rows (1-based), slots the columns; column 0 is the virtual source.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(gts + 1, 0.0), v(slots + 1, 0.0);
  std::vector<std::size_t> owner(slots + 1, 0), way(slots + 1, 0);
  for (std::size_t row = 1; row <= gts; ++row) {
    owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(slots + 1, kInf);
    std::vector<bool> used(slots + 1, false);
    do {
      used[col0] = true;
      const std::size_t row0 = owner[col0];
      double delta = kInf;
      std::size_t col1 = 0;
      for (std::size_t col = 1; col <= slots; ++col) {
        if (used[col]) continue;
        const double reduced = cost(col - 1, row0 - 1) - u[row0] - v[col];
        if (reduced < minv[col]) {
          minv[col] = reduced;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (std::size_t col = 0; col <= slots; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  std::vector<int> slot_of_gt(gts, -1);
  for (std::size_t col = 1; col <= slots; ++col) {
    if (owner[col] != 0) slot_of_gt[owner[col] - 1] = static_cast<int>(col - 1);
  }
  for (std::size_t j = 0; j < gts; ++j) {
    result.pairs.emplace_back(slot_of_gt[j], static_cast<int>(j));
    result.total_cost += cost(static_cast<std::size_t>(slot_of_gt[j]), j);
  }
  validate_assignment(result, slots, gts);
  return result;
}

void validate_assignment(const MatchAssignment& assignment, std::size_t slots, std::size_t gt_count) {
  if (assignment.pairs.size() != gt_count) throw MatchingError("assignment does not cover every ground truth");
  std::vector<bool> slot_used(slots, false), gt_used(gt_count, false);
  for (const auto& [slot, gt] : assignment.pairs) {
    if (slot < 0 || static_cast<std::size_t>(slot) >= slots) throw MatchingError("assignment slot out of range");
    if (gt < 0 || static_cast<std::size_t>(gt) >= gt_count) throw MatchingError("assignment gt index out of range");
    if (slot_used[static_cast<std::size_t>(slot)]) throw MatchingError("assignment reuses a prediction slot");
    if (gt_used[static_cast<std::size_t>(gt)]) throw MatchingError("assignment matches a ground truth twice");
    slot_used[static_cast<std::size_t>(slot)] = true;
    gt_used[static_cast<std::size_t>(gt)] = true;
  }
}

SetLoss set_loss(const DetectionSet& pred, const GroundTruthSet& gt, const MatchAssignment& assignment,
                 const LossWeights& w) {
  gt.validate();
  const std::size_t n = pred.size();
  validate_assignment(assignment, n, gt.size());
  const int no_object = static_cast<int>(pred.class_logits.dim(1)) - 1;
  const int no_target = static_cast<int>(pred.target_index_logits.dim(1)) - 1;

  std::vector<int> class_targets(n, no_object), index_targets(n, no_target);
  std::vector<double> class_weights(n, w.no_object_weight);
  for (const auto& [slot, j] : assignment.pairs) {
    const auto s = static_cast<std::size_t>(slot), g = static_cast<std::size_t>(j);
    class_targets[s] = gt.class_ids[g];
    class_weights[s] = 1.0;
    index_targets[s] = gt.target_indices[g];
  }

  SetLoss out;
  const Tensor class_term = cross_entropy(pred.class_logits, class_targets, class_weights);
  const Tensor index_term = cross_entropy(pred.target_index_logits, index_targets);
  Tensor total = add(scale(class_term, w.class_weight), scale(index_term, w.index_weight));
  out.class_loss = class_term.item();
  out.index_loss = index_term.item();
  if (!assignment.pairs.empty()) {
    std::vector<int> slots;
    std::vector<double> targets;
    for (const auto& [slot, j] : assignment.pairs) {
      slots.push_back(slot);
      const Box& b = gt.boxes[static_cast<std::size_t>(j)];
      targets.insert(targets.end(), b.begin(), b.end());
    }
    const Tensor matched = embedding_lookup(pred.boxes, slots);
    const Tensor box_term =
        scale(l1(matched, Tensor::from({slots.size(), 4}, std::move(targets))), 1.0 / static_cast<double>(slots.size()));
    out.box_loss = box_term.item();
    total = add(total, scale(box_term, w.box_weight));
  }
  out.total = total;
  return out;
}

BatchLoss batch_loss(const Model& model, std::span<const TrainingExample> batch, const LossWeights& w,
                     std::span<const MatchAssignment> assignments) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (!assignments.empty() && assignments.size() != batch.size()) {
    throw std::invalid_argument("batch_loss: one assignment per example required");
  }
  BatchLoss out;
  std::vector<Tensor> losses;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrainingExample& ex = batch[b];
    const DetectionSet pred = model.forward(*ex.image, ex.tokens).detections;
    MatchAssignment assignment;
    if (!assignments.empty()) {
      assignment = assignments[b];
    } else if (ex.targets.size() > 0) {
      assignment = hungarian(pairwise_cost(pred, ex.targets, w));
    }
    SetLoss loss = set_loss(pred, ex.targets, assignment, w);
    out.terms.class_loss += loss.class_loss * inv;
    out.terms.box_loss += loss.box_loss * inv;
    out.terms.index_loss += loss.index_loss * inv;
    out.terms.matched += assignment.pairs.size();
    losses.push_back(loss.total);
    out.assignments.push_back(std::move(assignment));
  }
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  out.total = scale(total, inv);
  out.terms.loss = out.total.item();
  return out;
}

Trainer::Trainer(Model& model, LossWeights weights, TrainerOptions options)
    : model_(model), weights_(weights), options_(options), optimizer_(options.optimizer) {
  weights_.validate();
}

TrainStepResult Trainer::step(std::span<const TrainingExample> batch) {
  ParameterStore& params = model_.parameters();
  params.zero_grad();
  GradientTape tape;
  BatchLoss loss = batch_loss(model_, batch, weights_);
  tape.backward(loss.total);
  if (!std::isfinite(loss.terms.loss)) throw NonFiniteError("Trainer: non-finite loss");
  loss.terms.grad_norm = clip_grad_norm(params, options_.grad_clip);
  optimizer_.step(params);
  return loss.terms;
}

}  // namespace ltd
