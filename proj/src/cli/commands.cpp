// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ltd/cli.hpp"

namespace ltd {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing required path: ") + what);
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

const char* kModelKeys[] = {"model.image_size",       "model.patch_size",       "model.d_model",
                            "model.n_heads",          "model.n_encoder_layers", "model.n_decoder_layers",
                            "model.n_object_queries", "model.n_target_queries", "model.n_classes",
                            "model.vocab_size",       "model.ffn_dim",          "model.max_targets_per_sample"};

std::map<std::string, std::string> model_meta(const ModelConfig& model) {
  RunConfig carrier;
  carrier.model = model;
  std::map<std::string, std::string> out;
  for (const char* key : kModelKeys) out[key] = carrier.get(key);
  return out;
}

std::string join(std::span<const std::string> items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

std::vector<std::string> vocabulary_words(const Vocabulary& vocab) {
  const auto& words = vocab.words();
  return {words.begin() + Vocabulary::kUnk + 1, words.end()};
}

const std::string& meta_value(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw CheckpointError(std::string(kCheckpointVersion) + ": missing meta entry '" + key + "'");
  return it->second;
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw CheckpointError(std::string(kCheckpointVersion) + ": shape mismatch for " + name + ": checkpoint " +
                          shape_to_string(src.shape()) + ", model " + shape_to_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

fs::path checkpoint_path(const fs::path& dir, std::int64_t step) {
  char name[48];
  std::snprintf(name, sizeof(name), "checkpoint_%06lld.ckpt", static_cast<long long>(step));
  return dir / name;
}

std::string loss_row(std::int64_t step, const TrainStepResult& r) {
  return std::to_string(step) + "," + format_double(r.loss) + "," + format_double(r.class_loss) + "," +
         format_double(r.box_loss) + "," + format_double(r.index_loss);
}

constexpr const char* kLossHeader = "step,loss,class_loss,box_loss,index_loss";

}  // namespace

// ---- pipeline ------------------------------------------------------------------

const Image& ImageSet::by_id(int image_id) const {
  auto it = index.find(image_id);
  if (it == index.end()) throw std::invalid_argument("unknown image id " + std::to_string(image_id));
  return images[it->second];
}

ImageSet load_image_set(const fs::path& annotations) {
  ImageSet set;
  set.store = load_annotations(annotations);
  const fs::path root = annotations.parent_path();
  for (std::size_t i = 0; i < set.store.images.size(); ++i) {
    const ImageEntry& entry = set.store.images[i];
    Image img = read_ppm(root / entry.file_name);
    if (img.width != entry.width || img.height != entry.height) {
      throw AnnotationError("image " + std::to_string(entry.id) + ": file size differs from the annotation");
    }
    set.index[entry.id] = i;
    set.images.push_back(std::move(img));
  }
  return set;
}

ModelConfig resolve_model_config(ModelConfig model, std::size_t n_classes, const Vocabulary& vocab) {
  const int classes = static_cast<int>(n_classes), words = static_cast<int>(vocab.size());
  if (model.n_classes == 0) model.n_classes = classes;
  if (model.vocab_size == 0) model.vocab_size = words;
  if (model.n_classes != classes) {
    throw ConfigError("model.n_classes=" + std::to_string(model.n_classes) + " but the data has " + std::to_string(classes));
  }
  if (model.vocab_size != words) {
    throw ConfigError("model.vocab_size=" + std::to_string(model.vocab_size) + " but the vocabulary has " +
                      std::to_string(words));
  }
  model.validate();
  return model;
}

std::vector<TrainingExample> make_examples(std::span<const TargetedSample> samples, const ImageSet& images,
                                           const Vocabulary& vocab, const ModelConfig& model) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const TargetedSample& s : samples) {
    TrainingExample ex;
    ex.image = &images.by_id(s.image_id);
    if (ex.image->width != model.image_size || ex.image->height != model.image_size) {
      throw ConfigError("image " + std::to_string(s.image_id) + " is not " + std::to_string(model.image_size) +
                        " pixels square");
    }
    ex.tokens = tokenize(vocab, s.phrases, model.n_target_queries, model.max_targets_per_sample);
    // Instances of phrases lost to truncation are dropped with them.
    for (const TargetInstance& inst : s.instances) {
      if (!s.is_all() && inst.target_index >= ex.tokens.phrase_count) continue;
      ex.targets.boxes.push_back(inst.box);
      ex.targets.class_ids.push_back(inst.class_id);
      ex.targets.target_indices.push_back(inst.target_index);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, std::size_t n) {
  if (n == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  for (int k = 0; k < batch_size; ++k) {
    const std::uint64_t h = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(step)), static_cast<std::uint64_t>(k));
    out.push_back(static_cast<std::size_t>(h % n));
  }
  return out;
}

TrainingExample hflip_example(const TrainingExample& example, Image& storage) {
  const Image& src = *example.image;
  storage = Image(src.width, src.height);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) storage.at(src.width - 1 - x, y, c) = src.at(x, y, c);
    }
  }
  TrainingExample out = example;
  out.image = &storage;
  for (Box& b : out.targets.boxes) b[0] = 1.0 - b[0];
  return out;
}

bool hflip_draw(std::uint64_t seed, std::int64_t step, int k) {
  const std::uint64_t h = mix_seed(mix_seed(seed ^ 0x5eed'f11bull, static_cast<std::uint64_t>(step)),
                                   static_cast<std::uint64_t>(k));
  return (h >> 63) != 0;
}

Checkpoint make_training_checkpoint(const Model& model, const AdamW& optimizer, std::int64_t step,
                                    const Vocabulary& vocab, std::span<const std::string> class_names) {
  Checkpoint ckpt;
  ckpt.meta = model_meta(model.config());
  ckpt.meta["step"] = std::to_string(step);
  ckpt.meta["adam.step"] = std::to_string(optimizer.state().step);
  ckpt.meta["vocab"] = join(vocabulary_words(vocab), " ");
  ckpt.meta["classes"] = join(class_names, "|");
  for (const auto& [name, t] : model.parameters().entries()) ckpt.tensors.emplace_back(name, t.detach());
  const AdamWState& st = optimizer.state();
  for (const auto& [name, t] : model.parameters().entries()) {
    for (const auto* moments : {&st.first_moment, &st.second_moment}) {
      auto it = moments->find(name);
      if (it == moments->end()) continue;
      ckpt.tensors.emplace_back((moments == &st.first_moment ? "adam.m." : "adam.v.") + name,
                                Tensor::from(t.shape(), it->second));
    }
  }
  return ckpt;
}

namespace {

ModelConfig model_config_from(const Checkpoint& ckpt) {
  RunConfig carrier;
  for (const char* key : kModelKeys) carrier.set(key, meta_value(ckpt, key));
  carrier.model.validate();
  return carrier.model;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
  for (auto& [name, t] : model.parameters().entries()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw CheckpointError(std::string(kCheckpointVersion) + ": checkpoint lacks parameter " + name);
    copy_into(t, *src, name);
  }
}

void restore_optimizer(AdamW& optimizer, const Model& model, const Checkpoint& ckpt) {
  AdamWState& st = optimizer.state();
  st.step = std::stoll(meta_value(ckpt, "adam.step"));
  st.first_moment.clear();
  st.second_moment.clear();
  for (const auto& [name, t] : model.parameters().entries()) {
    const Tensor* m = ckpt.find("adam.m." + name);
    const Tensor* v = ckpt.find("adam.v." + name);
    if (!m || !v) {
      if (st.step > 0) throw CheckpointError(std::string(kCheckpointVersion) + ": missing optimizer state for " + name);
      continue;
    }
    if (m->shape() != t.shape() || v->shape() != t.shape()) {
      throw CheckpointError(std::string(kCheckpointVersion) + ": optimizer state shape mismatch for " + name);
    }
    st.first_moment[name].assign(m->data().begin(), m->data().end());
    st.second_moment[name].assign(v->data().begin(), v->data().end());
  }
}

}  // namespace

LoadedModel load_model(const fs::path& manifest) {
  const Checkpoint ckpt = load_checkpoint(manifest);
  const std::vector<std::string> words = split(meta_value(ckpt, "vocab"), ' ');
  LoadedModel out{Vocabulary::from_phrases(words), split(meta_value(ckpt, "classes"), '|'),
                  Model(model_config_from(ckpt), 0), std::stoll(meta_value(ckpt, "step"))};
  if (static_cast<int>(out.vocab.size()) != out.model.config().vocab_size) {
    throw CheckpointError(std::string(kCheckpointVersion) + ": vocabulary does not match model.vocab_size");
  }
  restore_parameters(out.model, ckpt);
  return out;
}

// ---- commands ------------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, std::ostream& out) {
  const std::uint64_t seed = cfg.require_seed();
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir / "images");
  ShapesDataset ds = generate_shapes_dataset(cfg.gen_images, cfg.gen_size, seed);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    ImageEntry& entry = ds.store.images[i];
    entry.file_name = "images/" + entry.file_name;
    write_ppm(dir / entry.file_name, ds.images[i]);
  }
  save_annotations(dir / "annotations.json", ds.store);
  out << "generated " << ds.images.size() << " images with " << ds.store.instances.size() << " instances in "
      << dir.string() << '\n';
  return 0;
}

int cmd_convert(const RunConfig& cfg, std::ostream& out) {
  SamplingConfig sampling = cfg.sampling;
  sampling.global_seed = cfg.require_seed();
  require_file(cfg.annotations, "annotation file");
  const AnnotationStore store = load_annotations(cfg.annotations);
  const fs::path target = cfg.dataset.empty() ? fs::path(cfg.out_dir) / "dataset.jsonl" : fs::path(cfg.dataset);
  if (target.has_parent_path()) ensure_dir(target.parent_path());
  const auto samples = convert_dataset(store, sampling, cfg.sampling_epochs, cfg.workers);
  write_dataset(target, samples);
  out << "wrote " << samples.size() << " records (" << store.images.size() << " images x " << cfg.sampling_epochs
      << " epochs) to " << target.string() << '\n';
  return 0;
}

int cmd_stats(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.dataset, "dataset");
  const auto samples = read_dataset(cfg.dataset);
  if (samples.empty()) throw std::invalid_argument("dataset " + cfg.dataset + " has no records");
  const DatasetStats st = dataset_stats(samples);
  char pct[32];
  std::snprintf(pct, sizeof(pct), "%.2f", 100.0 * st.single_instance_target_fraction());
  out << "images=" << st.images << '\n'
      << "total_instances=" << st.total_instances << '\n'
      << "targets=" << st.targets << '\n'
      << "categories_per_image=" << format_double(st.categories_per_image) << '\n'
      << "instances_per_image=" << format_double(st.instances_per_image) << '\n'
      << "instances_per_category=" << format_double(st.instances_per_category) << '\n'
      << "targets_with_1_instance_pct=" << pct << '\n';
  for (const auto& [count, targets] : st.instances_per_target) {
    out << "instances_per_target." << count << '=' << targets << '\n';
  }
  for (const auto& [cls, count] : st.instances_per_class) out << "instances_per_class." << cls << '=' << count << '\n';
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const std::uint64_t seed = cfg.require_seed();
  require_file(cfg.annotations, "annotation file");
  require_file(cfg.dataset, "dataset");
  if (!cfg.resume.empty()) require_file(cfg.resume, "resume checkpoint");
  if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.checkpoint_every < 1) {
    throw ConfigError("train.steps must be >= 0, train.batch_size and train.checkpoint_every >= 1");
  }
  if (cfg.hflip != 0 && cfg.hflip != 1) throw ConfigError("train.hflip must be 0 or 1");
  if (cfg.lr_drop_step < 0 || !(cfg.lr_drop_factor > 0.0)) {
    throw ConfigError("optim.lr_drop_step must be >= 0 and optim.lr_drop_factor > 0");
  }
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);

  const ImageSet images = load_image_set(cfg.annotations);
  const std::vector<std::string> names = images.store.class_names();
  const Vocabulary vocab = Vocabulary::from_phrases(names);
  const ModelConfig model_cfg = resolve_model_config(cfg.model, names.size(), vocab);
  const auto samples = read_dataset(cfg.dataset);
  if (samples.empty()) throw std::invalid_argument("dataset " + cfg.dataset + " has no records");
  const std::vector<TrainingExample> examples = make_examples(samples, images, vocab, model_cfg);

  Model model(model_cfg, seed);
  if (!cfg.token_embeddings.empty()) {
    std::ifstream table(cfg.token_embeddings);
    if (!table) throw ConfigError("cannot open token embeddings " + cfg.token_embeddings);
    out << "loaded " << model.load_token_embeddings(table, vocab) << " token embeddings\n";
  }
  Trainer trainer(model, cfg.loss, cfg.trainer);

  std::int64_t start = 0;
  std::vector<std::string> log_rows;
  const fs::path log_path = dir / "loss.csv";
  if (!cfg.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(cfg.resume);
    for (const auto& [key, value] : model_meta(model_cfg)) {
      if (meta_value(ckpt, key) != value) {
        throw CheckpointError(std::string(kCheckpointVersion) + ": checkpoint has " + key + "=" + meta_value(ckpt, key) +
                              " but the config gives " + value);
      }
    }
    restore_parameters(model, ckpt);
    restore_optimizer(trainer.optimizer(), model, ckpt);
    start = std::stoll(meta_value(ckpt, "step"));
    std::ifstream previous(log_path);
    std::string line;
    while (std::getline(previous, line)) {
      if (line.empty() || line == kLossHeader) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= start) log_rows.push_back(line);
    }
    out << "resumed from step " << start << '\n';
  }

  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  log << kLossHeader << '\n';
  for (const auto& row : log_rows) log << row << '\n';

  const double base_lr = cfg.trainer.optimizer.learning_rate;
  std::vector<Image> mirrored(static_cast<std::size_t>(cfg.batch_size));
  const auto t0 = std::chrono::steady_clock::now();
  for (std::int64_t step = start + 1; step <= cfg.steps; ++step) {
    const bool dropped = cfg.lr_drop_step > 0 && step > cfg.lr_drop_step;
    trainer.optimizer().state().options.learning_rate = dropped ? base_lr * cfg.lr_drop_factor : base_lr;
    std::vector<TrainingExample> batch;
    const auto rows = batch_indices(seed, step, cfg.batch_size, examples.size());
    for (int k = 0; k < cfg.batch_size; ++k) {
      const TrainingExample& ex = examples[rows[static_cast<std::size_t>(k)]];
      if (cfg.hflip && hflip_draw(seed, step, k)) {
        batch.push_back(hflip_example(ex, mirrored[static_cast<std::size_t>(k)]));
      } else {
        batch.push_back(ex);
      }
    }
    const TrainStepResult r = trainer.step(batch);
    log << loss_row(step, r) << '\n';
    if (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
      const Checkpoint ckpt = make_training_checkpoint(model, trainer.optimizer(), step, vocab, names);
      save_checkpoint(checkpoint_path(dir, step), ckpt);
      save_checkpoint(dir / "checkpoint.ckpt", ckpt);
      log.flush();
    }
    if (step % 100 == 0 || step == cfg.steps) {
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char line[160];
      std::snprintf(line, sizeof(line), "step %lld loss %.4f (class %.4f box %.4f index %.4f) %.1fs\n",
                    static_cast<long long>(step), r.loss, r.class_loss, r.box_loss, r.index_loss, seconds);
      out << line << std::flush;
    }
  }
  if (!log) throw std::runtime_error("short write on " + log_path.string());
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const std::uint64_t seed = cfg.require_seed();
  require_file(cfg.checkpoint, "checkpoint");
  require_file(cfg.annotations, "annotation file");
  const Protocol protocol = parse_protocol(cfg.protocol);
  cfg.eval.validate();
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);

  LoadedModel loaded = load_model(cfg.checkpoint);
  const ImageSet images = load_image_set(cfg.annotations);
  if (images.store.class_names() != loaded.class_names) {
    throw ConfigError("annotation categories differ from the categories the checkpoint was trained on");
  }
  const auto groups = group_by_image(images.store);
  ModelPredictor predictor(loaded.model, loaded.vocab);

  const auto samples = protocol_samples(groups, loaded.class_names, protocol, seed);
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < samples.size(); ++i) items.push_back({&images.images[i], samples[i]});
  const EvalReport report = evaluate(predictor, items, loaded.class_names, cfg.eval);
  const fs::path report_path = dir / (std::string("eval_") + protocol_name(protocol) + ".txt");
  {
    std::ofstream os(report_path, std::ios::trunc);
    os << "protocol=" << protocol_name(protocol) << '\n' << "checkpoint_step=" << loaded.step << '\n' << format_report(report);
    if (!os) throw std::runtime_error("cannot write " + report_path.string());
  }
  out << "protocol " << protocol_name(protocol) << '\n' << format_report_table(report);

  if (!cfg.rates.empty()) {
    const auto rows = deceptive_eval(predictor, images.images, groups, loaded.class_names, cfg.rates, seed, cfg.eval);
    const fs::path sweep_path = dir / "deceptive.txt";
    std::ofstream os(sweep_path, std::ios::trunc);
    os << format_deceptive(rows);
    if (!os) throw std::runtime_error("cannot write " + sweep_path.string());
    out << "deceptive targets (targeted_only)\n" << format_deceptive_table(rows);
  }
  return 0;
}

int cmd_attn(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.checkpoint, "checkpoint");
  require_file(cfg.annotations, "annotation file");
  const fs::path dir = fs::path(cfg.out_dir) / "attn";
  ensure_dir(dir);

  const LoadedModel loaded = load_model(cfg.checkpoint);
  const ImageSet images = load_image_set(cfg.annotations);
  const Image& image = images.by_id(cfg.attn_image_id);
  const ModelConfig& mc = loaded.model.config();
  const std::vector<std::string> phrases = cfg.attn_targets.empty() ? std::vector<std::string>{"[all]"} : cfg.attn_targets;
  const TokenSequence tokens = tokenize(loaded.vocab, phrases, mc.n_target_queries, mc.max_targets_per_sample);
  const ForwardResult result = loaded.model.forward(image, tokens, true);

  auto write_csv = [&](const fs::path& path, const Tensor& w) {
    std::ofstream os(path, std::ios::trunc);
    os << "query_index,key_index,weight\n";
    for (std::size_t q = 0; q < w.dim(0); ++q) {
      for (std::size_t k = 0; k < w.dim(1); ++k) os << q << ',' << k << ',' << format_double(w.at(q, k)) << '\n';
    }
    if (!os) throw std::runtime_error("cannot write " + path.string());
  };
  std::size_t files = 0;
  const int grid = mc.grid_size();
  for (std::size_t l = 0; l < result.attention.self_attention.size(); ++l) {
    for (std::size_t h = 0; h < result.attention.self_attention[l].size(); ++h) {
      const std::string tag = "l" + std::to_string(l) + "_h" + std::to_string(h);
      write_csv(dir / ("self_attention_" + tag + ".csv"), result.attention.self_attention[l][h]);
      const Tensor& target = result.attention.target_attention[l][h];
      write_csv(dir / ("target_attention_" + tag + ".csv"), target);
      files += 2;
      for (std::size_t q = 0; q < target.dim(0); ++q) {
        std::vector<double> map(target.dim(1));
        for (std::size_t k = 0; k < map.size(); ++k) map[k] = target.at(q, k);
        const double peak = *std::max_element(map.begin(), map.end());
        if (peak > 0.0) {
          for (double& v : map) v /= peak;
        }
        write_pgm(dir / ("target_attention_" + tag + "_q" + std::to_string(q) + ".pgm"), grid, grid, map);
        ++files;
      }
    }
  }

  const DetectionSet& det = result.detections;
  const Tensor class_prob = softmax(det.class_logits, 1);
  const Tensor index_prob = softmax(det.target_index_logits, 1);
  std::ofstream preds(dir / "predictions.csv", std::ios::trunc);
  preds << "slot,cx,cy,w,h,class,class_prob,target_index,index_prob,kept\n";
  std::size_t kept = 0;
  for (std::size_t i = 0; i < det.size(); ++i) {
    std::size_t best_class = 0, best_index = 0;
    for (std::size_t c = 0; c < class_prob.dim(1); ++c) {
      if (class_prob.at(i, c) > class_prob.at(i, best_class)) best_class = c;
    }
    for (std::size_t c = 0; c + 1 < index_prob.dim(1); ++c) {
      if (index_prob.at(i, c) > index_prob.at(i, best_index)) best_index = c;
    }
    const bool keep = best_class + 1 < class_prob.dim(1);
    kept += keep;
    const std::string label = keep ? loaded.class_names[best_class] : std::string("no-object");
    preds << i << ',' << format_double(det.boxes.at(i, 0)) << ',' << format_double(det.boxes.at(i, 1)) << ','
          << format_double(det.boxes.at(i, 2)) << ',' << format_double(det.boxes.at(i, 3)) << ',' << label << ','
          << format_double(class_prob.at(i, best_class)) << ',' << best_index << ','
          << format_double(index_prob.at(i, best_index)) << ',' << (keep ? 1 : 0) << '\n';
  }
  if (!preds) throw std::runtime_error("cannot write predictions.csv");
  out << "image " << cfg.attn_image_id << " targets [" << join(phrases, "|") << "]: " << kept << " detections, "
      << files << " attention dumps in " << dir.string() << '\n';
  return 0;
}

}  // namespace ltd
