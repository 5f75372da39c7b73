// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line operator surface. A run is described by a flat key=value
// config; flags override config values.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ltd/checkpoint.hpp"
#include "ltd/dataprep.hpp"
#include "ltd/evaluation.hpp"
#include "ltd/matching.hpp"
#include "ltd/model.hpp"

namespace ltd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  RunConfig();

  // model.n_classes and model.vocab_size of 0 are derived from the data.
  ModelConfig model;
  LossWeights loss;
  TrainerOptions trainer;
  SamplingConfig sampling;  // global_seed follows `seed`
  int sampling_epochs = 1;
  EvalConfig eval;

  std::optional<std::uint64_t> seed;
  int workers = 1;

  std::string annotations;  // annotation file; images resolve relative to it
  std::string dataset;      // targeted dataset (one JSON record per line)
  std::string checkpoint;   // manifest to read in eval / attn
  std::string resume;       // manifest to resume training from
  std::string out_dir = "out";
  std::string token_embeddings;  // optional "word v1 .. vd" table

  int steps = 2000;
  int batch_size = 8;
  int checkpoint_every = 500;
  int hflip = 0;  // 1: mirror each drawn example with probability 1/2

  // The learning rate is multiplied by lr_drop_factor after lr_drop_step
  // (0 disables the drop).
  int lr_drop_step = 0;
  double lr_drop_factor = 0.1;

  int gen_images = 32;
  int gen_size = 64;

  std::string protocol = "all";
  std::vector<double> rates;

  int attn_image_id = 0;
  std::vector<std::string> attn_targets;  // empty means "[all]"

  // Throws ConfigError on an unknown key or unparsable value.
  void set(const std::string& key, const std::string& value);
  std::vector<std::string> keys() const;
  std::string get(const std::string& key) const;

  std::uint64_t require_seed() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& cfg);

// Annotation store plus decoded images, in store order.
struct ImageSet {
  AnnotationStore store;
  std::vector<Image> images;
  std::unordered_map<int, std::size_t> index;  // image id -> position

  const Image& by_id(int image_id) const;
};

ImageSet load_image_set(const std::filesystem::path& annotations);

// Fills the data-derived fields and validates.
ModelConfig resolve_model_config(ModelConfig model, std::size_t n_classes, const Vocabulary& vocab);

std::vector<TrainingExample> make_examples(std::span<const TargetedSample> samples, const ImageSet& images,
                                           const Vocabulary& vocab, const ModelConfig& model);

// Dataset rows drawn for one training step; a pure function of its inputs.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, std::size_t n);

// Mirrors image and boxes left to right; the image lands in `storage`.
TrainingExample hflip_example(const TrainingExample& example, Image& storage);

// Whether batch slot k of `step` is mirrored when train.hflip is on.
bool hflip_draw(std::uint64_t seed, std::int64_t step, int k);

Checkpoint make_training_checkpoint(const Model& model, const AdamW& optimizer, std::int64_t step,
                                    const Vocabulary& vocab, std::span<const std::string> class_names);

// Model, vocabulary and class names recovered from a checkpoint.
struct LoadedModel {
  Vocabulary vocab;
  std::vector<std::string> class_names;
  Model model;
  std::int64_t step = 0;
};
LoadedModel load_model(const std::filesystem::path& manifest);

int cmd_gen(const RunConfig& cfg, std::ostream& out);
int cmd_convert(const RunConfig& cfg, std::ostream& out);
int cmd_stats(const RunConfig& cfg, std::ostream& out);
int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, std::ostream& out);
int cmd_attn(const RunConfig& cfg, std::ostream& out);

// Entry point of the `ltd` tool.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ltd
