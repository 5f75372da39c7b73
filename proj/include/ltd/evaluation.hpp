// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// COCO-style detection metrics: greedy score-ordered matching, 101-point
// interpolated AP averaged over match keys and IoU thresholds, and size
// buckets with ignore semantics.

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ltd/dataprep.hpp"
#include "ltd/model.hpp"
#include "ltd/tokenizer.hpp"

namespace ltd {

double iou(const Box& a, const Box& b);

enum class ScoreSource { kClass, kClassTimesIndex };
enum class Protocol { kAll, kTargetedOnly };

const char* protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);

struct EvalConfig {
  std::vector<double> iou_thresholds = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  // Reference areas in pixels² for an image of side `reference_size`; scaled
  // by the image area.
  double small_area = 32.0 * 32.0;
  double medium_area = 96.0 * 96.0;
  double reference_size = 640.0;
  ScoreSource score_source = ScoreSource::kClass;
  int max_detections = 100;

  void validate() const;
};

struct ScoredBox {
  int image = 0;
  Box box{};
  double score = 0.0;
  int key = 0;
  double area = 0.0;  // pixels² at the reference image size
};

struct GroundTruthBox {
  int image = 0;
  Box box{};
  int key = 0;
  double area = 0.0;  // pixels² at the reference image size
};

struct AreaRange {
  double lo = 0.0;
  double hi = 1e300;
  bool contains(double a) const { return a >= lo && a < hi; }
};

// AP of one key at one threshold. nullopt when the key has no
// in-range ground truth.
std::optional<double> key_average_precision(std::span<const ScoredBox> predictions,
                                            std::span<const GroundTruthBox> ground_truths, int key,
                                            double iou_threshold, AreaRange range = {});

// Mean of key_average_precision over keys with ground truth.
std::optional<double> average_precision(std::span<const ScoredBox> predictions,
                                        std::span<const GroundTruthBox> ground_truths, double iou_threshold,
                                        AreaRange range = {});

// One post-processed detection slot.
struct Detection {
  Box box{};
  int class_id = 0;
  double class_prob = 0.0;
  int target_index = 0;
  double index_prob = 0.0;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<Detection> predict(const Image& image, const TargetedSample& sample) = 0;
};

// Slots whose argmax class is no-object are dropped; the class score is the
// max probability over real classes and the target index is the argmax over
// real indices.
std::vector<Detection> decode_detections(const DetectionSet& detections);

class ModelPredictor : public Predictor {
 public:
  ModelPredictor(const Model& model, const Vocabulary& vocab);
  std::vector<Detection> predict(const Image& image, const TargetedSample& sample) override;

 private:
  const Model& model_;
  const Vocabulary& vocab_;
};

struct EvalItem {
  const Image* image = nullptr;
  TargetedSample sample;
};

// "all": the [all] phrase against every instance. "targeted_only": sampled
// phrases against the sampled instances only; with a positive deceptive_rate
// absent-category phrases are appended from an independent stream, so the
// genuine phrases match the rate-0 draw.
std::vector<TargetedSample> protocol_samples(std::span<const ImageAnnotation> images,
                                             std::span<const std::string> class_names, Protocol protocol,
                                             std::uint64_t seed, double deceptive_rate = 0.0);

struct EvalReport {
  std::optional<double> ap, ap50, ap75, ap_small, ap_medium, ap_large, target_index_ap;
  std::map<std::string, std::optional<double>> per_category;
  std::size_t images = 0;
  std::size_t ground_truths = 0;
  std::size_t detections = 0;
};

// Throws std::invalid_argument on an empty item list.
EvalReport evaluate(Predictor& predictor, std::span<const EvalItem> items, std::span<const std::string> class_names,
                    const EvalConfig& cfg);

struct DeceptiveRow {
  double rate = 0.0;
  EvalReport report;
};

// `images` and `annotations` are parallel.
std::vector<DeceptiveRow> deceptive_eval(Predictor& predictor, std::span<const Image> images,
                                         std::span<const ImageAnnotation> annotations,
                                         std::span<const std::string> class_names, std::span<const double> rates,
                                         std::uint64_t seed, const EvalConfig& cfg);

std::string format_report(const EvalReport& report);  // key=value lines
std::string format_report_table(const EvalReport& report);
std::string format_deceptive(std::span<const DeceptiveRow> rows);  // key=value lines
std::string format_deceptive_table(std::span<const DeceptiveRow> rows);

// Parses key=value lines; blank lines and '#' comments are skipped.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace ltd
