// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/dataprep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"

namespace ltd {

using json = nlohmann::ordered_json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

int line_of_byte(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

template <typename T>
T required(const json& obj, const char* key, const char* where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw AnnotationError(std::string(where) + ": missing required field '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw AnnotationError(std::string(where) + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

// ---- annotation store ------------------------------------------------------

void AnnotationStore::validate() const {
  std::unordered_map<int, const ImageEntry*> by_id;
  for (const auto& img : images) {
    if (img.width <= 0 || img.height <= 0) {
      throw AnnotationError("image " + std::to_string(img.id) + ": non-positive size");
    }
    if (!by_id.emplace(img.id, &img).second) throw AnnotationError("image " + std::to_string(img.id) + ": duplicate id");
  }
  std::set<int> category_ids;
  for (const auto& c : categories) {
    if (!category_ids.insert(c.id).second) throw AnnotationError("category " + std::to_string(c.id) + ": duplicate id");
  }
  for (const auto& inst : instances) {
    auto it = by_id.find(inst.image_id);
    if (it == by_id.end()) throw AnnotationError("image " + std::to_string(inst.image_id) + ": instance references a missing image");
    if (!category_ids.count(inst.category_id)) {
      throw AnnotationError("image " + std::to_string(inst.image_id) + ": unknown category " +
                            std::to_string(inst.category_id));
    }
    const ImageEntry& img = *it->second;
    if (!(inst.w > 0.0 && inst.h > 0.0)) {
      throw AnnotationError("image " + std::to_string(inst.image_id) + ": box with non-positive size");
    }
    if (inst.x < 0.0 || inst.y < 0.0 || inst.x + inst.w > img.width + 1e-9 || inst.y + inst.h > img.height + 1e-9) {
      throw AnnotationError("image " + std::to_string(inst.image_id) + ": box outside image bounds");
    }
  }
}

int AnnotationStore::class_index(int category_id) const {
  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (categories[i].id == category_id) return static_cast<int>(i);
  }
  throw AnnotationError("unknown category id " + std::to_string(category_id));
}

std::vector<std::string> AnnotationStore::class_names() const {
  std::vector<std::string> names;
  for (const auto& c : categories) names.push_back(c.name);
  return names;
}

AnnotationStore parse_annotations(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw AnnotationError("annotation parse error at line " + std::to_string(line_of_byte(text, e.byte)) + ": " +
                          e.what());
  }
  AnnotationStore store;
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw AnnotationError(std::string("annotation file: missing array '") + key + "'");
    }
  }
  for (const auto& img : doc["images"]) {
    ImageEntry e;
    e.id = required<int>(img, "id", "images[]");
    const std::string where = "image " + std::to_string(e.id);
    e.width = required<int>(img, "width", where.c_str());
    e.height = required<int>(img, "height", where.c_str());
    e.file_name = img.contains("file_name") ? img["file_name"].get<std::string>() : std::string();
    store.images.push_back(std::move(e));
  }
  for (const auto& c : doc["categories"]) {
    CategoryEntry e;
    e.id = required<int>(c, "id", "categories[]");
    e.name = required<std::string>(c, "name", ("category " + std::to_string(e.id)).c_str());
    store.categories.push_back(std::move(e));
  }
  for (const auto& a : doc["annotations"]) {
    InstanceEntry e;
    e.image_id = required<int>(a, "image_id", "annotations[]");
    const std::string where = "annotation on image " + std::to_string(e.image_id);
    e.category_id = required<int>(a, "category_id", where.c_str());
    const auto bbox = required<std::vector<double>>(a, "bbox", where.c_str());
    if (bbox.size() != 4) throw AnnotationError(where + ": bbox must have 4 numbers");
    e.x = bbox[0];
    e.y = bbox[1];
    e.w = bbox[2];
    e.h = bbox[3];
    store.instances.push_back(e);
  }
  store.validate();
  return store;
}

AnnotationStore load_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw AnnotationError("cannot open annotation file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_annotations(ss.str());
  } catch (const AnnotationError& e) {
    throw AnnotationError(path.string() + ": " + e.what());
  }
}

void save_annotations(const std::filesystem::path& path, const AnnotationStore& store) {
  json doc;
  doc["images"] = json::array();
  for (const auto& img : store.images) {
    doc["images"].push_back({{"id", img.id}, {"file_name", img.file_name}, {"width", img.width}, {"height", img.height}});
  }
  doc["annotations"] = json::array();
  int ann_id = 1;
  for (const auto& inst : store.instances) {
    doc["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", inst.image_id},
                                  {"category_id", inst.category_id},
                                  {"bbox", {inst.x, inst.y, inst.w, inst.h}},
                                  {"area", inst.w * inst.h},
                                  {"iscrowd", 0}});
  }
  doc["categories"] = json::array();
  for (const auto& c : store.categories) doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw AnnotationError("cannot write annotation file " + path.string());
  os << doc.dump(1) << '\n';
}

Box to_normalized_cxcywh(double x, double y, double w, double h, int image_width, int image_height) {
  const double iw = image_width, ih = image_height;
  return {(x + w / 2.0) / iw, (y + h / 2.0) / ih, w / iw, h / ih};
}

std::vector<int> ImageAnnotation::categories() const {
  std::vector<int> out;
  for (int c : class_ids) {
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

std::vector<ImageAnnotation> group_by_image(const AnnotationStore& store) {
  std::vector<ImageAnnotation> out;
  std::unordered_map<int, std::size_t> slot;
  std::unordered_map<int, int> class_of;
  for (std::size_t i = 0; i < store.categories.size(); ++i) class_of[store.categories[i].id] = static_cast<int>(i);
  for (const auto& img : store.images) {
    slot[img.id] = out.size();
    out.push_back({img.id, img.width, img.height, {}, {}});
  }
  for (const auto& inst : store.instances) {
    ImageAnnotation& a = out[slot.at(inst.image_id)];
    a.boxes.push_back(to_normalized_cxcywh(inst.x, inst.y, inst.w, inst.h, a.width, a.height));
    a.class_ids.push_back(class_of.at(inst.category_id));
  }
  return out;
}

// ---- sampling ----------------------------------------------------------------

GroundTruthSet TargetedSample::ground_truth() const {
  GroundTruthSet gt;
  for (const auto& inst : instances) {
    gt.boxes.push_back(inst.box);
    gt.class_ids.push_back(inst.class_id);
    gt.target_indices.push_back(inst.target_index);
  }
  return gt;
}

void SamplingConfig::validate() const {
  if (!(all_token_probability >= 0.0 && all_token_probability <= 1.0)) {
    throw std::invalid_argument("SamplingConfig: all_token_probability must lie in [0, 1]");
  }
  if (!(deceptive_rate >= 0.0)) throw std::invalid_argument("SamplingConfig: deceptive_rate must be non-negative");
}

namespace {

TargetedSample blank_sample(const ImageAnnotation& image) {
  TargetedSample s;
  s.image_id = image.image_id;
  s.width = image.width;
  s.height = image.height;
  return s;
}

// Draws `count` distinct entries of `pool` in draw order.
std::vector<int> draw_without_replacement(std::vector<int> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

const std::string& name_of(std::span<const std::string> names, int class_id) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= names.size()) {
    throw std::out_of_range("class id " + std::to_string(class_id) + " has no name");
  }
  return names[static_cast<std::size_t>(class_id)];
}

}  // namespace

TargetedSample sample_targets(const ImageAnnotation& image, std::span<const std::string> class_names, Rng& rng) {
  const std::vector<int> present = image.categories();
  if (present.empty()) throw std::invalid_argument("sample_targets: image has no annotated category");
  std::uniform_int_distribution<std::size_t> pick_s(1, present.size());
  const std::size_t s = pick_s(rng);
  const std::vector<int> chosen = draw_without_replacement(present, s, rng);

  TargetedSample out = blank_sample(image);
  for (int c : chosen) out.phrases.push_back(name_of(class_names, c));
  for (std::size_t i = 0; i < image.class_ids.size(); ++i) {
    auto it = std::find(chosen.begin(), chosen.end(), image.class_ids[i]);
    if (it == chosen.end()) continue;
    out.instances.push_back({image.boxes[i], image.class_ids[i], static_cast<int>(it - chosen.begin())});
  }
  return out;
}

TargetedSample make_sample(const ImageAnnotation& image, std::span<const std::string> class_names,
                           const SamplingConfig& cfg, Rng& rng) {
  if (image.class_ids.empty()) return blank_sample(image);
  std::bernoulli_distribution use_all(cfg.all_token_probability);
  if (use_all(rng)) {
    TargetedSample out = blank_sample(image);
    out.phrases.emplace_back("[all]");
    for (std::size_t i = 0; i < image.class_ids.size(); ++i) out.instances.push_back({image.boxes[i], image.class_ids[i], 0});
    return out;
  }
  return sample_targets(image, class_names, rng);
}

std::size_t deceptive_count(std::size_t genuine_targets, double rate) {
  const double product = static_cast<double>(genuine_targets) * rate;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(product + 1e-9)));
}

TargetedSample inject_deceptive(TargetedSample sample, const ImageAnnotation& image,
                                std::span<const std::string> class_names, double rate, Rng& rng) {
  if (!(rate > 0.0)) throw std::invalid_argument("inject_deceptive: rate must be positive");
  const std::vector<int> present = image.categories();
  std::vector<int> absent;
  for (int c = 0; c < static_cast<int>(class_names.size()); ++c) {
    if (std::find(present.begin(), present.end(), c) == present.end()) absent.push_back(c);
  }
  const std::size_t genuine = sample.phrases.size() - static_cast<std::size_t>(sample.deceptive_count);
  const std::size_t count = deceptive_count(genuine, rate);
  if (absent.size() < count) {
    throw std::runtime_error("inject_deceptive: category universe exhausted for image " + std::to_string(image.image_id));
  }
  for (int c : draw_without_replacement(absent, count, rng)) sample.phrases.push_back(name_of(class_names, c));
  sample.deceptive_count += static_cast<int>(count);
  return sample;
}

std::uint64_t image_seed(std::uint64_t global_seed, int image_id, int epoch) {
  std::uint64_t h = splitmix64(global_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(image_id)));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(epoch)) << 32));
  return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t value) { return splitmix64(splitmix64(seed) ^ value); }

std::uint64_t deceptive_seed(std::uint64_t sample_seed) { return splitmix64(sample_seed ^ 0xdecea5edull); }

std::vector<TargetedSample> convert_dataset(const AnnotationStore& store, const SamplingConfig& cfg, int epochs,
                                            int workers) {
  store.validate();
  cfg.validate();
  if (epochs < 1) throw std::invalid_argument("convert_dataset: epochs must be >= 1");
  const std::vector<ImageAnnotation> images = group_by_image(store);
  const std::vector<std::string> names = store.class_names();
  const std::size_t total = images.size() * static_cast<std::size_t>(epochs);
  std::vector<TargetedSample> out(total);

  auto convert_one = [&](std::size_t index) {
    const int epoch = static_cast<int>(index / images.size());
    const ImageAnnotation& image = images[index % images.size()];
    const std::uint64_t seed = image_seed(cfg.global_seed, image.image_id, epoch);
    Rng rng(seed);
    TargetedSample s = make_sample(image, names, cfg, rng);
    if (cfg.deceptive_rate > 0.0 && !s.is_all() && image.categories().size() < names.size()) {
      // Separate stream so genuine targets do not depend on the rate.
      Rng deceptive_rng(deceptive_seed(seed));
      s = inject_deceptive(std::move(s), image, names, cfg.deceptive_rate, deceptive_rng);
    }
    s.seed = seed;
    s.epoch = epoch;
    out[index] = std::move(s);
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), total));
  if (n_workers == 1) {
    for (std::size_t i = 0; i < total; ++i) convert_one(i);
    return out;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < total; i += n_workers) convert_one(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---- dataset file ------------------------------------------------------------

std::string sample_to_json_line(const TargetedSample& s) {
  json rec;
  rec["image_id"] = s.image_id;
  rec["width"] = s.width;
  rec["height"] = s.height;
  rec["epoch"] = s.epoch;
  rec["seed"] = s.seed;
  rec["phrases"] = s.phrases;
  rec["deceptive"] = s.deceptive_count;
  rec["instances"] = json::array();
  for (const auto& inst : s.instances) {
    rec["instances"].push_back(
        {{"box", {inst.box[0], inst.box[1], inst.box[2], inst.box[3]}}, {"class_id", inst.class_id}, {"target_index", inst.target_index}});
  }
  return rec.dump();
}

TargetedSample sample_from_json_line(const std::string& line) {
  const json rec = json::parse(line);
  TargetedSample s;
  s.image_id = rec.at("image_id").get<int>();
  s.width = rec.at("width").get<int>();
  s.height = rec.at("height").get<int>();
  s.epoch = rec.at("epoch").get<int>();
  s.seed = rec.at("seed").get<std::uint64_t>();
  s.phrases = rec.at("phrases").get<std::vector<std::string>>();
  s.deceptive_count = rec.at("deceptive").get<int>();
  for (const auto& inst : rec.at("instances")) {
    const auto box = inst.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw std::invalid_argument("dataset record: box must have 4 numbers");
    s.instances.push_back({{box[0], box[1], box[2], box[3]}, inst.at("class_id").get<int>(), inst.at("target_index").get<int>()});
  }
  return s;
}

void write_dataset(const std::filesystem::path& path, std::span<const TargetedSample> samples) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& s : samples) os << sample_to_json_line(s) << '\n';
  if (!os) throw std::runtime_error("short write on dataset " + path.string());
}

std::vector<TargetedSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<TargetedSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---- statistics ----------------------------------------------------------------

double DatasetStats::single_instance_target_fraction() const {
  if (targets == 0) return 0.0;
  auto it = instances_per_target.find(1);
  return it == instances_per_target.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(targets);
}

DatasetStats dataset_stats(std::span<const TargetedSample> samples) {
  if (samples.empty()) throw std::invalid_argument("dataset_stats: empty dataset");
  DatasetStats st;
  std::size_t category_slots = 0;
  for (const auto& s : samples) {
    ++st.images;
    st.total_instances += s.instances.size();
    std::set<int> classes;
    std::vector<std::size_t> per_target(s.phrases.size(), 0);
    for (const auto& inst : s.instances) {
      classes.insert(inst.class_id);
      ++st.instances_per_class[inst.class_id];
      if (inst.target_index >= 0 && static_cast<std::size_t>(inst.target_index) < per_target.size()) {
        ++per_target[static_cast<std::size_t>(inst.target_index)];
      }
    }
    category_slots += classes.size();
    for (std::size_t count : per_target) {
      ++st.targets;
      ++st.instances_per_target[count];
    }
  }
  const double n = static_cast<double>(st.images);
  st.categories_per_image = static_cast<double>(category_slots) / n;
  st.instances_per_image = static_cast<double>(st.total_instances) / n;
  st.instances_per_category =
      category_slots == 0 ? 0.0 : static_cast<double>(st.total_instances) / static_cast<double>(category_slots);
  return st;
}

// ---- synthetic shapes ----------------------------------------------------------

std::vector<bool> rasterize_shape(const std::string& kind, int image_size, double cx, double cy, double extent) {
  std::vector<bool> mask(static_cast<std::size_t>(image_size) * image_size, false);
  const double half = extent / 2.0;
  const double top = cy - half, bottom = cy + half;
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      if (kind == "square") {
        inside = std::abs(px - cx) <= half && std::abs(py - cy) <= half;
      } else if (kind == "circle") {
        inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half;
      } else if (kind == "triangle") {
        inside = py >= top && py <= bottom && std::abs(px - cx) <= (py - top) / 2.0;
      } else {
        throw std::invalid_argument("rasterize_shape: unknown shape '" + kind + "'");
      }
      mask[static_cast<std::size_t>(y) * image_size + x] = inside;
    }
  }
  return mask;
}

ShapesDataset generate_shapes_dataset(int n_images, int image_size, std::uint64_t seed,
                                      std::span<const std::string> categories) {
  if (n_images < 1) throw std::invalid_argument("generate_shapes_dataset: need at least one image");
  if (image_size < 16) throw std::invalid_argument("generate_shapes_dataset: image_size must be at least 16");
  if (categories.empty()) throw std::invalid_argument("generate_shapes_dataset: no categories");
  ShapesDataset ds;
  for (std::size_t i = 0; i < categories.size(); ++i) ds.store.categories.push_back({static_cast<int>(i) + 1, categories[i]});

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> shape_count(1, 5);
  std::uniform_int_distribution<std::size_t> pick_kind(0, categories.size() - 1);
  const double min_extent = 0.15 * image_size, max_extent = 0.4 * image_size;

  for (int n = 0; n < n_images; ++n) {
    const int image_id = n + 1;
    Image image(image_size, image_size);
    for (double& v : image.pixels) v = 0.15 + 0.1 * unit(rng);

    struct Placed {
      int x0, y0, x1, y1;
    };
    std::vector<Placed> placed;
    const int wanted = shape_count(rng);
    for (int s = 0; s < wanted; ++s) {
      const std::size_t kind = pick_kind(rng);
      const double r = unit(rng), g = unit(rng), b = unit(rng);
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double extent = min_extent + (max_extent - min_extent) * unit(rng);
        const double cx = extent / 2.0 + (image_size - extent) * unit(rng);
        const double cy = extent / 2.0 + (image_size - extent) * unit(rng);
        const std::vector<bool> mask = rasterize_shape(categories[kind], image_size, cx, cy, extent);
        int x0 = image_size, y0 = image_size, x1 = -1, y1 = -1;
        for (int y = 0; y < image_size; ++y) {
          for (int x = 0; x < image_size; ++x) {
            if (!mask[static_cast<std::size_t>(y) * image_size + x]) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
          }
        }
        if (x1 < 0 || x1 - x0 < 2 || y1 - y0 < 2) continue;
        const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const Placed& p) {
          return !(x1 + 1 < p.x0 || p.x1 + 1 < x0 || y1 + 1 < p.y0 || p.y1 + 1 < y0);
        });
        if (overlaps) continue;
        placed.push_back({x0, y0, x1, y1});
        const double colour[3] = {0.45 + 0.55 * r, 0.45 + 0.55 * g, 0.45 + 0.55 * b};
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x)
            if (mask[static_cast<std::size_t>(y) * image_size + x])
              for (int c = 0; c < 3; ++c) image.at(x, y, c) = colour[c];
        ds.store.instances.push_back({image_id, static_cast<int>(kind) + 1, static_cast<double>(x0),
                                      static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
                                      static_cast<double>(y1 - y0 + 1)});
        break;
      }
    }
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.ppm", image_id);
    ds.store.images.push_back({image_id, name, image_size, image_size});
    ds.images.push_back(std::move(image));
  }
  return ds;
}

}  // namespace ltd
