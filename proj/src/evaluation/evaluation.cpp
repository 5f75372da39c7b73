// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ltd {

double iou(const Box& a, const Box& b) {
  const double aw = a[2], ah = a[3], bw = b[2], bh = b[3];
  if (!(aw > 0.0 && ah > 0.0 && bw > 0.0 && bh > 0.0)) return 0.0;
  const double ix = std::min(a[0] + aw / 2, b[0] + bw / 2) - std::max(a[0] - aw / 2, b[0] - bw / 2);
  const double iy = std::min(a[1] + ah / 2, b[1] + bh / 2) - std::max(a[1] - ah / 2, b[1] - bh / 2);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (aw * ah + bw * bh - inter);
}

const char* protocol_name(Protocol p) { return p == Protocol::kAll ? "all" : "targeted_only"; }

Protocol parse_protocol(const std::string& name) {
  if (name == "all") return Protocol::kAll;
  if (name == "targeted_only") return Protocol::kTargetedOnly;
  throw std::invalid_argument("unknown protocol '" + name + "' (expected all or targeted_only)");
}

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw std::invalid_argument("EvalConfig: no IoU thresholds");
  for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
    const double t = iou_thresholds[i];
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("EvalConfig: IoU thresholds must lie in (0, 1]");
    if (i > 0 && !(t > iou_thresholds[i - 1])) {
      throw std::invalid_argument("EvalConfig: IoU thresholds must be strictly increasing");
    }
  }
  if (!(small_area > 0.0 && medium_area > small_area)) {
    throw std::invalid_argument("EvalConfig: size bucket thresholds must be increasing");
  }
  if (!(reference_size > 0.0)) throw std::invalid_argument("EvalConfig: reference_size must be positive");
  if (max_detections < 1) throw std::invalid_argument("EvalConfig: max_detections must be >= 1");
}

std::optional<double> key_average_precision(std::span<const ScoredBox> predictions,
                                            std::span<const GroundTruthBox> ground_truths, int key,
                                            double iou_threshold, AreaRange range) {
  struct Candidate {
    const GroundTruthBox* gt;
    bool ignored;
    bool used = false;
  };
  std::map<int, std::vector<Candidate>> by_image;
  std::size_t positives = 0;
  for (const auto& g : ground_truths) {
    if (g.key != key) continue;
    const bool ignored = !range.contains(g.area);
    by_image[g.image].push_back({&g, ignored});
    if (!ignored) ++positives;
  }
  if (positives == 0) return std::nullopt;

  std::vector<const ScoredBox*> dets;
  for (const auto& p : predictions) {
    if (p.key == key) dets.push_back(&p);
  }
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredBox* a, const ScoredBox* b) { return a->score > b->score; });

  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (const ScoredBox* d : dets) {
    auto it = by_image.find(d->image);
    Candidate* match = nullptr;
    if (it != by_image.end()) {
      // Unignored ground truths take priority over ignored ones.
      for (bool want_ignored : {false, true}) {
        double best = iou_threshold;
        for (Candidate& c : it->second) {
          if (c.used || c.ignored != want_ignored) continue;
          const double v = iou(d->box, c.gt->box);
          if (v >= best) {
            best = v;
            match = &c;
          }
        }
        if (match) break;
      }
    }
    if (match) {
      match->used = true;
      if (match->ignored) continue;
      ++tp;
    } else {
      if (!range.contains(d->area)) continue;
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k * 0.01;
    auto pos = std::lower_bound(recall.begin(), recall.end(), r);
    if (pos != recall.end()) total += precision[static_cast<std::size_t>(pos - recall.begin())];
  }
  return total / 101.0;
}

std::optional<double> average_precision(std::span<const ScoredBox> predictions,
                                        std::span<const GroundTruthBox> ground_truths, double iou_threshold,
                                        AreaRange range) {
  std::set<int> keys;
  for (const auto& g : ground_truths) keys.insert(g.key);
  double total = 0.0;
  int counted = 0;
  for (int key : keys) {
    if (auto ap = key_average_precision(predictions, ground_truths, key, iou_threshold, range)) {
      total += *ap;
      ++counted;
    }
  }
  if (counted == 0) return std::nullopt;
  return total / counted;
}

std::vector<Detection> decode_detections(const DetectionSet& det) {
  const std::size_t n = det.size();
  const std::size_t classes = det.class_logits.dim(1), indices = det.target_index_logits.dim(1);
  const auto boxes = det.boxes.data();
  const auto class_logits = det.class_logits.data();
  const auto index_logits = det.target_index_logits.data();
  auto softmax_row = [](const double* row, std::size_t width) {
    std::vector<double> p(row, row + width);
    const double mx = *std::max_element(p.begin(), p.end());
    double total = 0.0;
    for (double& v : p) total += (v = std::exp(v - mx));
    for (double& v : p) v /= total;
    return p;
  };
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> pc = softmax_row(class_logits.data() + i * classes, classes);
    const auto best_class = std::max_element(pc.begin(), pc.end() - 1);
    if (pc.back() > *best_class) continue;
    const std::vector<double> pi = softmax_row(index_logits.data() + i * indices, indices);
    const auto best_index = std::max_element(pi.begin(), pi.end() - 1);
    Detection d;
    d.box = {boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]};
    d.class_id = static_cast<int>(best_class - pc.begin());
    d.class_prob = *best_class;
    d.target_index = static_cast<int>(best_index - pi.begin());
    d.index_prob = *best_index;
    out.push_back(d);
  }
  return out;
}

ModelPredictor::ModelPredictor(const Model& model, const Vocabulary& vocab) : model_(model), vocab_(vocab) {}

std::vector<Detection> ModelPredictor::predict(const Image& image, const TargetedSample& sample) {
  const ModelConfig& cfg = model_.config();
  const TokenSequence tokens = tokenize(vocab_, sample.phrases, cfg.n_target_queries, cfg.max_targets_per_sample);
  return decode_detections(model_.forward(image, tokens).detections);
}

std::vector<TargetedSample> protocol_samples(std::span<const ImageAnnotation> images,
                                             std::span<const std::string> class_names, Protocol protocol,
                                             std::uint64_t seed, double deceptive_rate) {
  std::vector<TargetedSample> out;
  for (const ImageAnnotation& image : images) {
    TargetedSample s;
    if (protocol == Protocol::kAll) {
      s.image_id = image.image_id;
      s.width = image.width;
      s.height = image.height;
      s.phrases = {"[all]"};
      for (std::size_t i = 0; i < image.boxes.size(); ++i) s.instances.push_back({image.boxes[i], image.class_ids[i], 0});
    } else {
      const std::uint64_t sample_seed = image_seed(seed, image.image_id, 0);
      SamplingConfig targeted_only;
      targeted_only.all_token_probability = 0.0;
      Rng rng(sample_seed);
      s = make_sample(image, class_names, targeted_only, rng);
      s.seed = sample_seed;
      if (deceptive_rate > 0.0 && !s.phrases.empty() && image.categories().size() < class_names.size()) {
        Rng deceptive_rng(deceptive_seed(sample_seed));
        s = inject_deceptive(std::move(s), image, class_names, deceptive_rate, deceptive_rng);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::optional<double> mean_over_thresholds(std::span<const ScoredBox> preds, std::span<const GroundTruthBox> gts,
                                           std::span<const double> thresholds, AreaRange range,
                                           std::optional<int> key = std::nullopt) {
  double total = 0.0;
  for (double t : thresholds) {
    const auto ap = key ? key_average_precision(preds, gts, *key, t, range) : average_precision(preds, gts, t, range);
    if (!ap) return std::nullopt;
    total += *ap;
  }
  return total / static_cast<double>(thresholds.size());
}

}  // namespace

EvalReport evaluate(Predictor& predictor, std::span<const EvalItem> items, std::span<const std::string> class_names,
                    const EvalConfig& cfg) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const double ref_area = cfg.reference_size * cfg.reference_size;
  auto area_of = [&](const Box& b) { return b[2] * b[3] * ref_area; };

  std::vector<ScoredBox> class_preds, index_preds;
  std::vector<GroundTruthBox> class_gts, index_gts;
  EvalReport report;
  for (std::size_t n = 0; n < items.size(); ++n) {
    const EvalItem& item = items[n];
    if (!item.image) throw std::invalid_argument("evaluate: item without image");
    const int image = static_cast<int>(n);
    std::vector<Detection> dets = predictor.predict(*item.image, item.sample);
    auto score_of = [&](const Detection& d) {
      return cfg.score_source == ScoreSource::kClass ? d.class_prob : d.class_prob * d.index_prob;
    };
    std::stable_sort(dets.begin(), dets.end(),
                     [&](const Detection& a, const Detection& b) { return score_of(a) > score_of(b); });
    if (dets.size() > static_cast<std::size_t>(cfg.max_detections)) dets.resize(static_cast<std::size_t>(cfg.max_detections));
    for (const Detection& d : dets) {
      class_preds.push_back({image, d.box, score_of(d), d.class_id, area_of(d.box)});
      index_preds.push_back({image, d.box, score_of(d), d.target_index, area_of(d.box)});
    }
    for (const TargetInstance& inst : item.sample.instances) {
      class_gts.push_back({image, inst.box, inst.class_id, area_of(inst.box)});
      index_gts.push_back({image, inst.box, inst.target_index, area_of(inst.box)});
    }
    report.detections += dets.size();
  }
  report.images = items.size();
  report.ground_truths = class_gts.size();

  const double t50[] = {0.5}, t75[] = {0.75};
  const AreaRange all{};
  const AreaRange small{0.0, cfg.small_area}, medium{cfg.small_area, cfg.medium_area}, large{cfg.medium_area, 1e300};
  report.ap = mean_over_thresholds(class_preds, class_gts, cfg.iou_thresholds, all);
  report.ap50 = mean_over_thresholds(class_preds, class_gts, t50, all);
  report.ap75 = mean_over_thresholds(class_preds, class_gts, t75, all);
  report.ap_small = mean_over_thresholds(class_preds, class_gts, cfg.iou_thresholds, small);
  report.ap_medium = mean_over_thresholds(class_preds, class_gts, cfg.iou_thresholds, medium);
  report.ap_large = mean_over_thresholds(class_preds, class_gts, cfg.iou_thresholds, large);
  report.target_index_ap = mean_over_thresholds(index_preds, index_gts, cfg.iou_thresholds, all);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    report.per_category[class_names[c]] =
        mean_over_thresholds(class_preds, class_gts, cfg.iou_thresholds, all, static_cast<int>(c));
  }
  return report;
}

std::vector<DeceptiveRow> deceptive_eval(Predictor& predictor, std::span<const Image> images,
                                         std::span<const ImageAnnotation> annotations,
                                         std::span<const std::string> class_names, std::span<const double> rates,
                                         std::uint64_t seed, const EvalConfig& cfg) {
  if (images.size() != annotations.size()) throw std::invalid_argument("deceptive_eval: images and annotations differ");
  std::vector<DeceptiveRow> rows;
  for (double rate : rates) {
    if (rate < 0.0) throw std::invalid_argument("deceptive_eval: negative rate");
    const std::vector<TargetedSample> samples =
        protocol_samples(annotations, class_names, Protocol::kTargetedOnly, seed, rate);
    std::vector<EvalItem> items;
    for (std::size_t i = 0; i < samples.size(); ++i) items.push_back({&images[i], samples[i]});
    rows.push_back({rate, evaluate(predictor, items, class_names, cfg)});
  }
  return rows;
}

namespace {

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string value(const std::optional<double>& v) { return v ? number(*v) : "absent"; }

std::string short_value(const std::optional<double>& v) {
  if (!v) return "absent";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

std::vector<std::pair<std::string, std::optional<double>>> headline(const EvalReport& r) {
  return {{"AP", r.ap},         {"AP50", r.ap50},       {"AP75", r.ap75}, {"AP_S", r.ap_small},
          {"AP_M", r.ap_medium}, {"AP_L", r.ap_large}, {"target_index_AP", r.target_index_ap}};
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  for (const auto& [k, v] : headline(r)) os << k << '=' << value(v) << '\n';
  for (const auto& [name, v] : r.per_category) os << "AP." << name << '=' << value(v) << '\n';
  os << "images=" << r.images << '\n' << "ground_truths=" << r.ground_truths << '\n' << "detections=" << r.detections << '\n';
  return os.str();
}

std::string format_report_table(const EvalReport& r) {
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& [k, v] : headline(r)) rows.emplace_back(k, short_value(v));
  for (const auto& [name, v] : r.per_category) rows.emplace_back("AP[" + name + "]", short_value(v));
  rows.emplace_back("images", std::to_string(r.images));
  rows.emplace_back("ground truths", std::to_string(r.ground_truths));
  rows.emplace_back("detections", std::to_string(r.detections));
  std::size_t width = 0;
  for (const auto& row : rows) width = std::max(width, row.first.size());
  std::ostringstream os;
  for (const auto& [k, v] : rows) os << k << std::string(width - k.size() + 2, ' ') << v << '\n';
  return os.str();
}

std::string format_deceptive(std::span<const DeceptiveRow> rows) {
  std::ostringstream os;
  os << "rows=" << rows.size() << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << "row." << i << ".rate=" << number(rows[i].rate) << '\n';
    for (const auto& [k, v] : headline(rows[i].report)) os << "row." << i << '.' << k << '=' << value(v) << '\n';
  }
  return os.str();
}

std::string format_deceptive_table(std::span<const DeceptiveRow> rows) {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof(line), "%-8s %-8s %-8s %-8s %-8s\n", "rate", "AP", "AP50", "AP75", "idx_AP");
  os << line;
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%-8.3f %-8s %-8s %-8s %-8s\n", row.rate, short_value(row.report.ap).c_str(),
                  short_value(row.report.ap50).c_str(), short_value(row.report.ap75).c_str(),
                  short_value(row.report.target_index_ap).c_str());
    os << line;
  }
  return os.str();
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("line " + std::to_string(line_no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("line " + std::to_string(line_no) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace ltd
