// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Turns object-detection annotations into targeted-detection samples:
//   1. draw S uniformly from 1..M (M = categories present in the image),
//   2. draw S of those categories without replacement,
//   3. keep every instance of the drawn categories,
//   4. use the category names as target phrases,
//   5. label each instance with the index of its phrase.
// With probability all_token_probability the sample is instead the "[all]"
// phrase over every instance, and an image without annotations gets no
// phrases at all.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltd/image.hpp"
#include "ltd/matching.hpp"

namespace ltd {

class AnnotationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageEntry {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct CategoryEntry {
  int id = 0;
  std::string name;
};

struct InstanceEntry {
  int image_id = 0;
  int category_id = 0;
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;  // absolute pixels, top-left origin
};

// A strict subset of the COCO detection schema.
struct AnnotationStore {
  std::vector<ImageEntry> images;
  std::vector<InstanceEntry> instances;
  std::vector<CategoryEntry> categories;

  // Throws AnnotationError naming the offending image id.
  void validate() const;
  // Contiguous class index of a category id (position in `categories`).
  int class_index(int category_id) const;
  std::vector<std::string> class_names() const;
};

// Line-numbered AnnotationError on malformed JSON or missing fields.
AnnotationStore parse_annotations(const std::string& json_text);
AnnotationStore load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path, const AnnotationStore& store);

Box to_normalized_cxcywh(double x, double y, double w, double h, int image_width, int image_height);

// All instances of one image in class-index space.
struct ImageAnnotation {
  int image_id = 0;
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;
  std::vector<int> class_ids;

  // Distinct class ids in first-appearance order.
  std::vector<int> categories() const;
};

std::vector<ImageAnnotation> group_by_image(const AnnotationStore& store);

struct TargetInstance {
  Box box{};
  int class_id = 0;
  int target_index = 0;
};

struct TargetedSample {
  int image_id = 0;
  int width = 0;
  int height = 0;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> phrases;
  std::vector<TargetInstance> instances;
  int deceptive_count = 0;  // trailing phrases with no instances

  bool is_all() const { return phrases.size() == 1 && phrases.front() == "[all]"; }
  GroundTruthSet ground_truth() const;
};

struct SamplingConfig {
  double all_token_probability = 0.5;
  double deceptive_rate = 0.0;
  std::uint64_t global_seed = 0;

  void validate() const;
};

using Rng = std::mt19937_64;

// Requires at least one annotated category.
TargetedSample sample_targets(const ImageAnnotation& image, std::span<const std::string> class_names, Rng& rng);

TargetedSample make_sample(const ImageAnnotation& image, std::span<const std::string> class_names,
                           const SamplingConfig& cfg, Rng& rng);

// Appends max(1, floor(S·r)) phrases for categories absent from the image,
// S being the number of genuine phrases. Throws when no absent category is
// left to draw from.
TargetedSample inject_deceptive(TargetedSample sample, const ImageAnnotation& image,
                                std::span<const std::string> class_names, double rate, Rng& rng);

std::size_t deceptive_count(std::size_t genuine_targets, double rate);

// Order-independent per-image seed.
std::uint64_t image_seed(std::uint64_t global_seed, int image_id, int epoch);
// Stateless 64-bit mixing of a seed with a value.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t value);
// Seed of the deceptive-phrase stream derived from a sample seed.
std::uint64_t deceptive_seed(std::uint64_t sample_seed);

// Records ordered by (epoch, image order in the store); identical for any
// worker count.
std::vector<TargetedSample> convert_dataset(const AnnotationStore& store, const SamplingConfig& cfg, int epochs,
                                            int workers = 1);

// One JSON object per line.
std::string sample_to_json_line(const TargetedSample& sample);
TargetedSample sample_from_json_line(const std::string& line);
void write_dataset(const std::filesystem::path& path, std::span<const TargetedSample> samples);
std::vector<TargetedSample> read_dataset(const std::filesystem::path& path);

struct DatasetStats {
  std::size_t images = 0;
  std::size_t total_instances = 0;
  std::size_t targets = 0;
  double categories_per_image = 0.0;
  double instances_per_image = 0.0;
  double instances_per_category = 0.0;
  std::map<std::size_t, std::size_t> instances_per_target;  // instance count -> targets
  std::map<int, std::size_t> instances_per_class;

  double single_instance_target_fraction() const;
};

// Throws std::invalid_argument on an empty input.
DatasetStats dataset_stats(std::span<const TargetedSample> samples);

struct ShapesDataset {
  AnnotationStore store;
  std::vector<Image> images;  // parallel to store.images
};

inline const std::vector<std::string> kShapeCategories = {"square", "circle", "triangle"};

// 1-5 non-overlapping coloured shapes per image on a noisy background, with
// tight pixel boxes.
ShapesDataset generate_shapes_dataset(int n_images, int image_size, std::uint64_t seed,
                                      std::span<const std::string> categories = kShapeCategories);

// Pixel mask of one shape, used by the generator and by tests.
std::vector<bool> rasterize_shape(const std::string& kind, int image_size, double cx, double cy, double extent);

}  // namespace ltd
