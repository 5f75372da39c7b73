// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "ltd/matching.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace ltd;
using namespace ltd::testing;

namespace {

DetectionSet single_slot(Box box, std::vector<double> class_logits, std::vector<double> index_logits) {
  const std::size_t c = class_logits.size(), k = index_logits.size();
  return {Tensor::from({1, 4}, {box[0], box[1], box[2], box[3]}), Tensor::from({1, c}, std::move(class_logits)),
          Tensor::from({1, k}, std::move(index_logits))};
}

GroundTruthSet one_gt(Box box, int cls, int idx) { return {{box}, {cls}, {idx}}; }

}  // namespace

TEST_CASE("pairwise cost examples") {
  const LossWeights w;
  const DetectionSet perfect = single_slot({0.5, 0.5, 0.2, 0.2}, {1000, 0, 0, 0}, {0, 1000, 0});
  const CostMatrix zero = pairwise_cost(perfect, one_gt({0.5, 0.5, 0.2, 0.2}, 0, 1), w);
  CHECK(zero(0, 0) == 0.0);

  LossWeights box_only{0.0, 1.0, 0.0, 0.1};
  const DetectionSet shifted = single_slot({0.1, 0.0, 0.2, 0.2}, {0, 0, 0, 0}, {0, 0, 0});
  const CostMatrix c = pairwise_cost(shifted, one_gt({0.0, 0.0, 0.2, 0.2}, 2, 0), box_only);
  CHECK(c(0, 0) == doctest::Approx(0.1).epsilon(1e-15));

  CHECK_THROWS_AS(pairwise_cost(shifted, one_gt({0.5, 0.5, 0.2, 0.2}, 3, 0), w), MatchingError);
  CHECK_THROWS_AS(pairwise_cost(shifted, one_gt({0.5, 0.5, 0.2, 0.2}, 0, 2), w), MatchingError);
  CHECK_THROWS_AS(pairwise_cost(shifted, GroundTruthSet{}, w), MatchingError);
}

TEST_CASE("pairwise cost agrees with the term-by-term formula") {
  std::mt19937_64 rng(5);
  const LossWeights w{0.7, 3.0, 1.3, 0.1};
  const DetectionSet pred = random_detections(6, 3, 4, rng);
  const GroundTruthSet gt = random_ground_truth(4, 3, 4, rng);
  const CostMatrix cost = pairwise_cost(pred, gt, w);
  REQUIRE(cost.rows == 6);
  REQUIRE(cost.cols == 4);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(cost(i, j) - cost_oracle(pred, gt, w, i, j)) < 1e-12);
  }
}

TEST_CASE("hungarian small cases") {
  CostMatrix diag{3, 3, {0, 1, 1, 1, 0, 1, 1, 1, 0}};
  const MatchAssignment a = hungarian(diag);
  CHECK(a.total_cost == 0.0);
  for (const auto& [slot, gt] : a.pairs) CHECK(slot == gt);

  const MatchAssignment single = hungarian(CostMatrix{1, 1, {2.5}});
  REQUIRE(single.pairs.size() == 1);
  CHECK(single.pairs[0] == std::pair<int, int>{0, 0});
  CHECK(single.total_cost == 2.5);

  // Two slots prefer the same gt; the cheaper total wins.
  const MatchAssignment rect = hungarian(CostMatrix{3, 2, {1, 2, 0, 9, 5, 5}});
  CHECK(rect.total_cost == 2.0);

  CHECK(hungarian(CostMatrix{4, 0, {}}).pairs.empty());
  CHECK_THROWS_AS(hungarian(CostMatrix{1, 2, {0, 0}}), MatchingError);
  CHECK_THROWS_AS(hungarian(CostMatrix{2, 1, {0, std::nan("")}}), MatchingError);
  CHECK_THROWS_AS(hungarian(CostMatrix{2, 1, {0, INFINITY}}), MatchingError);
}

TEST_CASE("hungarian equals brute-force enumeration on random matrices") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(1, 7);
  std::uniform_real_distribution<double> unit(0.0, 10.0);
  std::uniform_int_distribution<int> small_int(0, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(size(rng));
    const std::size_t r = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    CostMatrix cost{n, r, std::vector<double>(n * r)};
    // Every other trial uses small integers so ties are frequent.
    for (double& v : cost.values) v = trial % 2 ? static_cast<double>(small_int(rng)) : unit(rng);
    const MatchAssignment a = hungarian(cost);
    validate_assignment(a, n, r);
    double recomputed = 0.0;
    for (const auto& [slot, gt] : a.pairs) recomputed += cost(static_cast<std::size_t>(slot), static_cast<std::size_t>(gt));
    CHECK(a.total_cost == recomputed);
    CHECK(a.total_cost == brute_force_min_cost(cost));
  }
}

TEST_CASE("validate_assignment rejects broken assignments") {
  CHECK_THROWS_AS(validate_assignment({{{0, 0}, {0, 1}}, 0}, 3, 2), MatchingError);
  CHECK_THROWS_AS(validate_assignment({{{0, 0}, {1, 0}}, 0}, 3, 2), MatchingError);
  CHECK_THROWS_AS(validate_assignment({{{0, 0}}, 0}, 3, 2), MatchingError);
  CHECK_THROWS_AS(validate_assignment({{{5, 0}}, 0}, 3, 1), MatchingError);
  CHECK_NOTHROW(validate_assignment({{{2, 0}, {0, 1}}, 0}, 3, 2));
}

TEST_CASE("set loss matches the direct formula and is non-negative") {
  std::mt19937_64 rng(9);
  const LossWeights w{1.0, 5.0, 1.0, 0.1};
  for (int trial = 0; trial < 20; ++trial) {
    const DetectionSet pred = random_detections(6, 3, 4, rng);
    const GroundTruthSet gt = random_ground_truth(static_cast<std::size_t>(trial % 5), 3, 4, rng);
    MatchAssignment a;
    if (gt.size() > 0) a = hungarian(pairwise_cost(pred, gt, w));
    const SetLoss loss = set_loss(pred, gt, a, w);
    const LossOracle ref = set_loss_oracle(pred, gt, a, w);
    CHECK(std::abs(loss.class_loss - ref.class_loss) < 1e-12);
    CHECK(std::abs(loss.box_loss - ref.box_loss) < 1e-12);
    CHECK(std::abs(loss.index_loss - ref.index_loss) < 1e-12);
    CHECK(std::abs(loss.total.item() - ref.total) < 1e-12);
    CHECK(loss.class_loss >= 0.0);
    CHECK(loss.box_loss >= 0.0);
    CHECK(loss.index_loss >= 0.0);
  }
}

TEST_CASE("empty ground truth reduces to no-object and no-target terms") {
  std::mt19937_64 rng(3);
  const DetectionSet pred = random_detections(5, 3, 4, rng);
  const SetLoss loss = set_loss(pred, GroundTruthSet{}, MatchAssignment{}, LossWeights{});
  CHECK(loss.box_loss == 0.0);
  double class_ce = 0.0, index_ce = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    class_ce -= std::log(softmax_row(pred.class_logits, i).back());
    index_ce -= std::log(softmax_row(pred.target_index_logits, i).back());
  }
  CHECK(std::abs(loss.class_loss - class_ce / 5.0) < 1e-12);
  CHECK(std::abs(loss.index_loss - index_ce / 5.0) < 1e-12);
  CHECK(std::isfinite(loss.total.item()));
}

TEST_CASE("set loss vanishes as perfect predictions sharpen") {
  const GroundTruthSet gt = one_gt({0.4, 0.6, 0.2, 0.3}, 1, 0);
  double previous = INFINITY;
  for (double sharp : {1.0, 5.0, 20.0, 60.0}) {
    const DetectionSet pred{Tensor::from({2, 4}, {0.4, 0.6, 0.2, 0.3, 0.5, 0.5, 0.1, 0.1}),
                            Tensor::from({2, 3}, {0, sharp, 0, 0, 0, sharp}),
                            Tensor::from({2, 3}, {sharp, 0, 0, 0, 0, sharp})};
    const MatchAssignment a = hungarian(pairwise_cost(pred, gt, LossWeights{}));
    const double loss = set_loss(pred, gt, a, LossWeights{}).total.item();
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-20);
}

TEST_CASE("loss is invariant to ground-truth order") {
  std::mt19937_64 rng(77);
  const LossWeights w;
  for (int trial = 0; trial < 100; ++trial) {
    const DetectionSet pred = random_detections(7, 3, 4, rng);
    const GroundTruthSet gt = random_ground_truth(1 + static_cast<std::size_t>(trial % 6), 3, 4, rng);
    std::vector<std::size_t> order(gt.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const GroundTruthSet shuffled = permuted(gt, order);
    const double a = set_loss(pred, gt, hungarian(pairwise_cost(pred, gt, w)), w).total.item();
    const double b = set_loss(pred, shuffled, hungarian(pairwise_cost(pred, shuffled, w)), w).total.item();
    CHECK(std::abs(a - b) < 1e-9);
  }
}

TEST_CASE("zero index coefficient ignores the target-index head") {
  std::mt19937_64 rng(31);
  const LossWeights w{1.0, 5.0, 0.0, 0.1};
  for (int trial = 0; trial < 20; ++trial) {
    const DetectionSet pred = random_detections(6, 3, 4, rng);
    DetectionSet other = pred;
    other.target_index_logits = random_detections(6, 3, 4, rng).target_index_logits;
    const GroundTruthSet gt = random_ground_truth(3, 3, 4, rng);
    const double a = set_loss(pred, gt, hungarian(pairwise_cost(pred, gt, w)), w).total.item();
    const double b = set_loss(other, gt, hungarian(pairwise_cost(other, gt, w)), w).total.item();
    CHECK(std::abs(a - b) < 1e-12);
  }
}

TEST_CASE("loss weights validation") {
  CHECK_THROWS_AS(LossWeights({0, 0, 0, 0.1}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(LossWeights({1, -1, 0, 0.1}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(LossWeights({1, 1, 1, 0.0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(LossWeights({1, 1, 1, 1.5}).validate(), std::invalid_argument);
  CHECK_NOTHROW(LossWeights({0, 0, 1, 1.0}).validate());
}

namespace {

struct TinySetup {
  Vocabulary vocab = Vocabulary::from_phrases(std::vector<std::string>{"red", "cube", "ball"});
  std::vector<Image> images;
  std::vector<TrainingExample> batch;
};

TinySetup make_setup(const ModelConfig& cfg, std::uint64_t seed) {
  TinySetup s;
  std::mt19937_64 rng(seed);
  s.images.push_back(random_image(cfg.image_size, rng));
  s.images.push_back(random_image(cfg.image_size, rng));
  const std::vector<std::string> two = {"red cube", "ball"};
  const std::vector<std::string> all = {"[all]"};
  TrainingExample a{&s.images[0], tokenize(s.vocab, two, cfg.n_target_queries, cfg.max_targets_per_sample),
                    {{{0.3, 0.3, 0.2, 0.2}, {0.7, 0.6, 0.3, 0.2}}, {0, 2}, {0, 1}}};
  TrainingExample b{&s.images[1], tokenize(s.vocab, all, cfg.n_target_queries, cfg.max_targets_per_sample),
                    {{{0.5, 0.5, 0.4, 0.4}}, {1}, {0}}};
  s.batch = {a, b};
  return s;
}

}  // namespace

TEST_CASE("end-to-end gradient matches finite differences with matching held fixed") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg, 17);
  TinySetup setup = make_setup(cfg, 4);
  const LossWeights w;
  const std::vector<MatchAssignment> fixed = batch_loss(model, setup.batch, w).assignments;
  auto loss = [&] { return batch_loss(model, setup.batch, w, fixed).total; };
  for (const char* name : {"decoder.1.target_attn.q.weight", "decoder.0.self_attn.k.weight", "token_embed",
                           "head.box2.bias", "encoder.0.ffn1.weight", "backbone.patch_proj.weight"}) {
    CAPTURE(name);
    CHECK(gradient_relative_error(loss, {model.parameters().get(name)}) < 1e-3);
  }
}

TEST_CASE("train step stays finite and overfits a single sample") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 16;
  cfg.ffn_dim = 32;
  Model model(cfg, 8);
  TinySetup setup = make_setup(cfg, 12);
  TrainerOptions options;
  options.optimizer.learning_rate = 1e-3;
  Trainer trainer(model, LossWeights{}, options);

  const std::span<const TrainingExample> both(setup.batch);
  for (int step = 0; step < 100; ++step) {
    const TrainStepResult r = trainer.step(both);
    REQUIRE(std::isfinite(r.loss));
    CHECK(r.matched == 3);
  }

  Model fresh(cfg, 8);
  Trainer single(fresh, LossWeights{}, options);
  const std::span<const TrainingExample> one(setup.batch.data(), 1);
  const double initial = single.step(one).loss;
  double last = initial;
  for (int step = 1; step < 500; ++step) last = single.step(one).loss;
  CHECK(last < 0.1 * initial);
}

TEST_CASE("empty image contributes zero matched pairs and a finite loss") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg, 2);
  TinySetup setup = make_setup(cfg, 6);
  TrainingExample empty{&setup.images[0], tokenize(setup.vocab, std::vector<std::string>{}, cfg.n_target_queries,
                                                   cfg.max_targets_per_sample),
                        {}};
  Trainer trainer(model, LossWeights{}, TrainerOptions{});
  const TrainStepResult r = trainer.step(std::span<const TrainingExample>(&empty, 1));
  CHECK(std::isfinite(r.loss));
  CHECK(r.matched == 0);
  CHECK(r.box_loss == 0.0);
}
