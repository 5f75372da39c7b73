// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "ltd/dataprep.hpp"

using namespace ltd;

namespace {

const std::vector<std::string> kNames = {"square", "circle", "triangle"};

ImageAnnotation image_with(std::vector<int> class_ids) {
  ImageAnnotation a{7, 64, 64, {}, {}};
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    a.boxes.push_back({0.1 + 0.1 * static_cast<double>(i), 0.5, 0.1, 0.1});
    a.class_ids.push_back(class_ids[i]);
  }
  return a;
}

// Checks the structural contract of a sample drawn from `image`.
void check_sample_contract(const TargetedSample& s, const ImageAnnotation& image) {
  const std::size_t genuine = s.phrases.size() - static_cast<std::size_t>(s.deceptive_count);
  if (s.is_all()) {
    CHECK(s.instances.size() == image.class_ids.size());
    for (const auto& inst : s.instances) CHECK(inst.target_index == 0);
    return;
  }
  std::vector<std::size_t> per_target(genuine, 0);
  for (const auto& inst : s.instances) {
    REQUIRE(inst.target_index >= 0);
    REQUIRE(static_cast<std::size_t>(inst.target_index) < genuine);
    ++per_target[static_cast<std::size_t>(inst.target_index)];
    CHECK(s.phrases[static_cast<std::size_t>(inst.target_index)] == kNames[static_cast<std::size_t>(inst.class_id)]);
  }
  CHECK(s.instances.size() >= genuine);
  for (std::size_t n : per_target) CHECK(n > 0);
  // Every instance of a chosen category is kept.
  std::size_t expected = 0;
  for (int c : image.class_ids) {
    if (std::find(s.phrases.begin(), s.phrases.begin() + static_cast<std::ptrdiff_t>(genuine), kNames[static_cast<std::size_t>(c)]) !=
        s.phrases.begin() + static_cast<std::ptrdiff_t>(genuine)) {
      ++expected;
    }
  }
  CHECK(s.instances.size() == expected);
}

const char* kFixture = R"({
  "images": [{"id": 1, "file_name": "a.ppm", "width": 100, "height": 200},
             {"id": 2, "file_name": "b.ppm", "width": 50, "height": 50}],
  "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40]},
                  {"id": 2, "image_id": 2, "category_id": 5, "bbox": [0, 0, 50, 50], "extra": true}],
  "categories": [{"id": 3, "name": "square"}, {"id": 5, "name": "circle"}, {"id": 9, "name": "triangle"}]
})";

}  // namespace

TEST_CASE("annotation parsing and validation") {
  const AnnotationStore store = parse_annotations(kFixture);
  CHECK(store.images.size() == 2);
  CHECK(store.instances.size() == 2);
  CHECK(store.class_index(5) == 1);
  CHECK(store.class_names() == kNames);

  const auto groups = group_by_image(store);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].boxes[0] == Box{0.25, 0.20, 0.30, 0.20});
  CHECK(groups[0].class_ids == std::vector<int>{0});
  CHECK(groups[1].boxes[0] == Box{0.5, 0.5, 1.0, 1.0});

  try {
    parse_annotations("{\n  \"images\": [\n  {\"id\": 1,,}\n]}");
    FAIL("expected a parse error");
  } catch (const AnnotationError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  auto expect_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_annotations(text);
      FAIL("expected an annotation error");
    } catch (const AnnotationError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };
  expect_error(R"({"images": [], "annotations": []})", "categories");
  expect_error(R"({"images": [{"id": 4, "width": 10}], "annotations": [], "categories": []})", "height");
  expect_error(R"({"images": [{"id": 4, "width": 10, "height": 10}],
                  "annotations": [{"image_id": 4, "category_id": 1, "bbox": [5, 5, 6, 2]}],
                  "categories": [{"id": 1, "name": "x"}]})",
               "image 4");
  expect_error(R"({"images": [{"id": 4, "width": 10, "height": 10}],
                  "annotations": [{"image_id": 8, "category_id": 1, "bbox": [1, 1, 2, 2]}],
                  "categories": [{"id": 1, "name": "x"}]})",
               "image 8");
  expect_error(R"({"images": [{"id": 4, "width": 10, "height": 10}],
                  "annotations": [{"image_id": 4, "category_id": 1, "bbox": [1, 1, 0, 2]}],
                  "categories": [{"id": 1, "name": "x"}]})",
               "image 4");
}

TEST_CASE("annotation file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "ltd_dataprep_roundtrip.json";
  const AnnotationStore store = parse_annotations(kFixture);
  save_annotations(path, store);
  const AnnotationStore back = load_annotations(path);
  REQUIRE(back.instances.size() == store.instances.size());
  for (std::size_t i = 0; i < store.instances.size(); ++i) {
    CHECK(back.instances[i].x == store.instances[i].x);
    CHECK(back.instances[i].h == store.instances[i].h);
    CHECK(back.instances[i].category_id == store.instances[i].category_id);
  }
  CHECK(back.images[1].file_name == "b.ppm");
  CHECK(back.class_names() == store.class_names());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_annotations(path), AnnotationError);
}

TEST_CASE("box conversion") {
  CHECK(to_normalized_cxcywh(10, 20, 30, 40, 100, 200) == Box{0.25, 0.20, 0.30, 0.20});
}

TEST_CASE("targeted sampling edge cases") {
  Rng rng(1);
  const ImageAnnotation single = image_with({2, 2, 2});
  for (int i = 0; i < 20; ++i) {
    const TargetedSample s = sample_targets(single, kNames, rng);
    CHECK(s.phrases == std::vector<std::string>{"triangle"});
    CHECK(s.instances.size() == 3);
    for (const auto& inst : s.instances) CHECK(inst.target_index == 0);
  }

  const ImageAnnotation three = image_with({0, 1, 2, 0});
  bool saw_full = false;
  for (int i = 0; i < 200; ++i) {
    const TargetedSample s = sample_targets(three, kNames, rng);
    check_sample_contract(s, three);
    if (s.phrases.size() == 3) {
      saw_full = true;
      CHECK(s.instances.size() == 4);
    }
  }
  CHECK(saw_full);

  SamplingConfig cfg;
  cfg.all_token_probability = 1.0;
  const TargetedSample all = make_sample(three, kNames, cfg, rng);
  CHECK(all.is_all());
  CHECK(all.instances.size() == 4);

  const TargetedSample empty = make_sample(image_with({}), kNames, SamplingConfig{}, rng);
  CHECK(empty.phrases.empty());
  CHECK(empty.instances.empty());
}

TEST_CASE("sampling frequencies match exact enumeration") {
  // Oracle: S is uniform on {1..M}; given S, every S-subset is equally likely,
  // so P(c chosen) = mean over S of C(M-1, S-1) / C(M, S).
  const ImageAnnotation image = image_with({0, 1, 1, 2});
  const int m = 3;
  auto choose = [](int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
  };
  double inclusion = 0.0;
  for (int s = 1; s <= m; ++s) inclusion += choose(m - 1, s - 1) / choose(m, s) / m;

  Rng rng(99);
  const int draws = 100000;
  std::map<std::size_t, int> s_count;
  std::map<std::string, int> chosen;
  for (int i = 0; i < draws; ++i) {
    const TargetedSample s = sample_targets(image, kNames, rng);
    ++s_count[s.phrases.size()];
    for (const auto& p : s.phrases) ++chosen[p];
  }
  for (std::size_t s = 1; s <= 3; ++s) CHECK(std::abs(s_count[s] / double(draws) - 1.0 / 3.0) < 0.01);
  for (const auto& name : kNames) CHECK(std::abs(chosen[name] / double(draws) - inclusion) < 0.01);
}

TEST_CASE("all-token fraction follows the configured probability") {
  Rng rng(5);
  const ImageAnnotation image = image_with({0, 2});
  SamplingConfig cfg;
  int all = 0;
  for (int i = 0; i < 10000; ++i) all += make_sample(image, kNames, cfg, rng).is_all();
  CHECK(std::abs(all / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("deceptive targets") {
  CHECK(deceptive_count(10, 0.1) == 1);
  CHECK(deceptive_count(3, 0.1) == 1);
  CHECK(deceptive_count(20, 0.2) == 4);
  CHECK(deceptive_count(1, 0.2) == 1);

  const std::vector<std::string> universe = {"a", "b", "c", "d", "e", "f"};
  Rng rng(12);
  std::uniform_int_distribution<int> cls(0, 5), count(1, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> ids;
    for (int i = count(rng); i > 0; --i) ids.push_back(cls(rng));
    ImageAnnotation image = image_with(ids);
    const std::vector<int> present = image.categories();
    if (present.size() == universe.size()) continue;
    const TargetedSample genuine = sample_targets(image, universe, rng);
    const double rate = trial % 2 ? 0.1 : 0.5;
    const TargetedSample s = inject_deceptive(genuine, image, universe, rate, rng);
    const std::size_t added = s.phrases.size() - genuine.phrases.size();
    CHECK(added == std::min(deceptive_count(genuine.phrases.size(), rate), universe.size() - present.size()));
    CHECK(static_cast<std::size_t>(s.deceptive_count) == added);
    CHECK(std::equal(genuine.phrases.begin(), genuine.phrases.end(), s.phrases.begin()));
    CHECK(s.instances.size() == genuine.instances.size());
    std::set<std::string> seen;
    for (std::size_t i = genuine.phrases.size(); i < s.phrases.size(); ++i) {
      CHECK(seen.insert(s.phrases[i]).second);
      for (int c : present) CHECK(s.phrases[i] != universe[static_cast<std::size_t>(c)]);
    }
  }

  const ImageAnnotation full = image_with({0, 1, 2});
  const TargetedSample s = sample_targets(full, kNames, rng);
  CHECK_THROWS_AS(inject_deceptive(s, full, kNames, 0.1, rng), std::runtime_error);
  CHECK_THROWS_AS(inject_deceptive(s, full, kNames, 0.0, rng), std::invalid_argument);
}

TEST_CASE("conversion is deterministic and worker-count independent") {
  const ShapesDataset ds = generate_shapes_dataset(40, 32, 3);
  SamplingConfig cfg;
  cfg.global_seed = 11;
  cfg.deceptive_rate = 0.2;
  const auto a = convert_dataset(ds.store, cfg, 3, 1);
  const auto b = convert_dataset(ds.store, cfg, 3, 4);
  const auto c = convert_dataset(ds.store, cfg, 3, 7);
  REQUIRE(a.size() == 120);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(sample_to_json_line(a[i]) == sample_to_json_line(b[i]));
    CHECK(sample_to_json_line(a[i]) == sample_to_json_line(c[i]));
  }
  const auto groups = group_by_image(ds.store);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].epoch == static_cast<int>(i / 40));
    check_sample_contract(a[i], groups[i % 40]);
  }

  cfg.global_seed = 12;
  const auto d = convert_dataset(ds.store, cfg, 3, 1);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += sample_to_json_line(a[i]) != sample_to_json_line(d[i]);
  CHECK(differ > 0);

  cfg.all_token_probability = 1.0;
  for (const auto& s : convert_dataset(ds.store, cfg, 2, 2)) CHECK(s.phrases == std::vector<std::string>{"[all]"});

  AnnotationStore broken = ds.store;
  broken.instances.push_back({999, 1, 0, 0, 1, 1});
  CHECK_THROWS_WITH_AS(convert_dataset(broken, cfg, 1), doctest::Contains("999"), AnnotationError);
}

TEST_CASE("genuine phrases do not depend on the deceptive rate") {
  const ShapesDataset ds = generate_shapes_dataset(30, 32, 8);
  SamplingConfig plain;
  plain.global_seed = 4;
  plain.all_token_probability = 0.3;
  SamplingConfig deceptive = plain;
  deceptive.deceptive_rate = 0.1;
  const auto a = convert_dataset(ds.store, plain, 1);
  const auto b = convert_dataset(ds.store, deceptive, 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(b[i].phrases.size() >= a[i].phrases.size());
    CHECK(std::equal(a[i].phrases.begin(), a[i].phrases.end(), b[i].phrases.begin()));
  }
}

TEST_CASE("dataset file round trip") {
  const ShapesDataset ds = generate_shapes_dataset(10, 32, 1);
  SamplingConfig cfg;
  cfg.global_seed = 2;
  const auto samples = convert_dataset(ds.store, cfg, 2);
  const auto path = std::filesystem::temp_directory_path() / "ltd_dataset_roundtrip.jsonl";
  write_dataset(path, samples);
  const auto back = read_dataset(path);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(sample_to_json_line(back[i]) == sample_to_json_line(samples[i]));
  {
    std::ofstream os(path, std::ios::app);
    os << "{not json\n";
  }
  CHECK_THROWS_WITH(read_dataset(path), doctest::Contains(":21:"));
  std::filesystem::remove(path);
}

TEST_CASE("dataset statistics on a hand-enumerated fixture") {
  auto inst = [](int cls, int idx) { return TargetInstance{{0.5, 0.5, 0.1, 0.1}, cls, idx}; };
  std::vector<TargetedSample> fixture(5);
  fixture[0].phrases = {"square"};
  fixture[0].instances = {inst(0, 0), inst(0, 0)};
  fixture[1].phrases = {"circle", "triangle"};
  fixture[1].instances = {inst(1, 0), inst(2, 1), inst(2, 1)};
  fixture[2].phrases = {"[all]"};
  fixture[2].instances = {inst(0, 0), inst(1, 0), inst(1, 0)};
  // fixture[3]: empty image.
  fixture[4].phrases = {"square", "circle"};
  fixture[4].deceptive_count = 1;
  fixture[4].instances = {inst(0, 0)};

  const DatasetStats st = dataset_stats(fixture);
  CHECK(st.images == 5);
  CHECK(st.total_instances == 9);
  CHECK(st.targets == 6);
  CHECK(st.categories_per_image == 6.0 / 5.0);
  CHECK(st.instances_per_image == 9.0 / 5.0);
  CHECK(st.instances_per_category == 9.0 / 6.0);
  CHECK(st.instances_per_target == std::map<std::size_t, std::size_t>{{0, 1}, {1, 2}, {2, 2}, {3, 1}});
  CHECK(st.instances_per_class == std::map<int, std::size_t>{{0, 4}, {1, 3}, {2, 2}});
  CHECK(st.single_instance_target_fraction() == 2.0 / 6.0);

  const DatasetStats single = dataset_stats(std::vector<TargetedSample>{{0, 0, 0, 0, 0, {"square"}, {inst(0, 0)}, 0}});
  CHECK(single.categories_per_image == 1.0);
  CHECK(single.instances_per_image == 1.0);
  CHECK_THROWS_AS(dataset_stats(std::vector<TargetedSample>{}), std::invalid_argument);
}

TEST_CASE("shapes generator") {
  const ShapesDataset ds = generate_shapes_dataset(25, 64, 7);
  const ShapesDataset again = generate_shapes_dataset(25, 64, 7);
  REQUIRE(ds.images.size() == 25);
  CHECK_NOTHROW(ds.store.validate());
  for (std::size_t i = 0; i < ds.images.size(); ++i) CHECK(ds.images[i].pixels == again.images[i].pixels);

  std::map<int, std::vector<InstanceEntry>> by_image;
  for (const auto& inst : ds.store.instances) by_image[inst.image_id].push_back(inst);
  for (std::size_t n = 0; n < ds.images.size(); ++n) {
    const Image& img = ds.images[n];
    const auto& boxes = by_image[ds.store.images[n].id];
    CHECK(boxes.size() >= 1);
    CHECK(boxes.size() <= 5);
    auto bright = [&](int x, int y) {
      return img.at(x, y, 0) > 0.4 || img.at(x, y, 1) > 0.4 || img.at(x, y, 2) > 0.4;
    };
    // Mask-bbox oracle: the bright pixels inside each box span it exactly.
    std::vector<bool> covered(64 * 64, false);
    for (const auto& b : boxes) {
      CHECK(b.x >= 0);
      CHECK(b.y >= 0);
      CHECK(b.x + b.w <= 64);
      CHECK(b.y + b.h <= 64);
      int x0 = 64, y0 = 64, x1 = -1, y1 = -1;
      for (int y = static_cast<int>(b.y); y < static_cast<int>(b.y + b.h); ++y) {
        for (int x = static_cast<int>(b.x); x < static_cast<int>(b.x + b.w); ++x) {
          covered[static_cast<std::size_t>(y * 64 + x)] = true;
          if (!bright(x, y)) continue;
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x);
          y1 = std::max(y1, y);
        }
      }
      CHECK(x0 == b.x);
      CHECK(y0 == b.y);
      CHECK(x1 + 1 == b.x + b.w);
      CHECK(y1 + 1 == b.y + b.h);
    }
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (!covered[static_cast<std::size_t>(y * 64 + x)]) CHECK_FALSE(bright(x, y));
  }
  CHECK_THROWS_AS(generate_shapes_dataset(0, 64, 1), std::invalid_argument);
}

TEST_CASE("shape rasterizer") {
  const auto square = rasterize_shape("square", 16, 8.0, 8.0, 4.0);
  CHECK(std::count(square.begin(), square.end(), true) == 16);
  const auto circle = rasterize_shape("circle", 32, 16.0, 16.0, 20.0);
  const double area = static_cast<double>(std::count(circle.begin(), circle.end(), true));
  CHECK(std::abs(area - M_PI * 100.0) < 0.05 * M_PI * 100.0);
  const auto tri = rasterize_shape("triangle", 32, 16.0, 16.0, 20.0);
  const double tri_area = static_cast<double>(std::count(tri.begin(), tri.end(), true));
  CHECK(std::abs(tri_area - 200.0) < 0.1 * 200.0);
  CHECK_THROWS_AS(rasterize_shape("hexagon", 16, 8, 8, 4), std::invalid_argument);
}
