// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "ltd/cli.hpp"

namespace ltd {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T value{};
  is >> value;
  if (!is || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return value;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field integer(const char* key, Access access) {
  return {key, [access](const RunConfig& c) { return std::to_string(access(c)); },
          [key, access](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); }};
}

template <typename Access>
Field real(const char* key, Access access) {
  return {key, [access](const RunConfig& c) { return format_double(access(c)); },
          [key, access](RunConfig& c, const std::string& v) { access(c) = parse_number<double>(key, v); }};
}

template <typename Access>
Field text(const char* key, Access access) {
  return {key, [access](const RunConfig& c) { return access(c); },
          [access](RunConfig& c, const std::string& v) { access(c) = v; }};
}

template <typename Access>
Field real_list(const char* key, Access access) {
  return {key,
          [access](const RunConfig& c) {
            std::vector<std::string> parts;
            for (double v : access(c)) parts.push_back(format_double(v));
            return join(parts, ',');
          },
          [key, access](RunConfig& c, const std::string& v) {
            std::vector<double> values;
            for (const auto& part : split(v, ',')) values.push_back(parse_number<double>(key, part));
            access(c) = values;
          }};
}

#define LTD_REF(expr) [](auto& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"seed", [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); },
       [](RunConfig& c, const std::string& v) {
         if (v.empty()) {
           c.seed.reset();
         } else {
           c.seed = parse_number<std::uint64_t>("seed", v);
         }
       }},
      integer<int>("workers", LTD_REF(c.workers)),
      text("paths.annotations", LTD_REF(c.annotations)),
      text("paths.dataset", LTD_REF(c.dataset)),
      text("paths.checkpoint", LTD_REF(c.checkpoint)),
      text("paths.resume", LTD_REF(c.resume)),
      text("paths.out", LTD_REF(c.out_dir)),
      text("paths.token_embeddings", LTD_REF(c.token_embeddings)),
      integer<int>("model.image_size", LTD_REF(c.model.image_size)),
      integer<int>("model.patch_size", LTD_REF(c.model.patch_size)),
      integer<int>("model.d_model", LTD_REF(c.model.d_model)),
      integer<int>("model.n_heads", LTD_REF(c.model.n_heads)),
      integer<int>("model.n_encoder_layers", LTD_REF(c.model.n_encoder_layers)),
      integer<int>("model.n_decoder_layers", LTD_REF(c.model.n_decoder_layers)),
      integer<int>("model.n_object_queries", LTD_REF(c.model.n_object_queries)),
      integer<int>("model.n_target_queries", LTD_REF(c.model.n_target_queries)),
      integer<int>("model.n_classes", LTD_REF(c.model.n_classes)),
      integer<int>("model.vocab_size", LTD_REF(c.model.vocab_size)),
      integer<int>("model.ffn_dim", LTD_REF(c.model.ffn_dim)),
      integer<int>("model.max_targets_per_sample", LTD_REF(c.model.max_targets_per_sample)),
      real("loss.class_weight", LTD_REF(c.loss.class_weight)),
      real("loss.box_weight", LTD_REF(c.loss.box_weight)),
      real("loss.index_weight", LTD_REF(c.loss.index_weight)),
      real("loss.no_object_weight", LTD_REF(c.loss.no_object_weight)),
      real("optim.learning_rate", LTD_REF(c.trainer.optimizer.learning_rate)),
      real("optim.beta1", LTD_REF(c.trainer.optimizer.beta1)),
      real("optim.beta2", LTD_REF(c.trainer.optimizer.beta2)),
      real("optim.epsilon", LTD_REF(c.trainer.optimizer.epsilon)),
      real("optim.weight_decay", LTD_REF(c.trainer.optimizer.weight_decay)),
      real("optim.grad_clip", LTD_REF(c.trainer.grad_clip)),
      integer<int>("optim.lr_drop_step", LTD_REF(c.lr_drop_step)),
      real("optim.lr_drop_factor", LTD_REF(c.lr_drop_factor)),
      real("sampling.all_token_probability", LTD_REF(c.sampling.all_token_probability)),
      real("sampling.deceptive_rate", LTD_REF(c.sampling.deceptive_rate)),
      integer<int>("sampling.epochs", LTD_REF(c.sampling_epochs)),
      integer<int>("train.steps", LTD_REF(c.steps)),
      integer<int>("train.batch_size", LTD_REF(c.batch_size)),
      integer<int>("train.checkpoint_every", LTD_REF(c.checkpoint_every)),
      integer<int>("train.hflip", LTD_REF(c.hflip)),
      real_list("eval.iou_thresholds", LTD_REF(c.eval.iou_thresholds)),
      real("eval.small_area", LTD_REF(c.eval.small_area)),
      real("eval.medium_area", LTD_REF(c.eval.medium_area)),
      real("eval.reference_size", LTD_REF(c.eval.reference_size)),
      {"eval.score_source",
       [](const RunConfig& c) {
         return std::string(c.eval.score_source == ScoreSource::kClass ? "class" : "class_times_index");
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "class") {
           c.eval.score_source = ScoreSource::kClass;
         } else if (v == "class_times_index") {
           c.eval.score_source = ScoreSource::kClassTimesIndex;
         } else {
           throw ConfigError("config key 'eval.score_source': expected class or class_times_index");
         }
       }},
      integer<int>("eval.max_detections", LTD_REF(c.eval.max_detections)),
      text("eval.protocol", LTD_REF(c.protocol)),
      real_list("eval.rates", LTD_REF(c.rates)),
      integer<int>("gen.images", LTD_REF(c.gen_images)),
      integer<int>("gen.size", LTD_REF(c.gen_size)),
      integer<int>("attn.image_id", LTD_REF(c.attn_image_id)),
      {"attn.targets", [](const RunConfig& c) { return join(c.attn_targets, '|'); },
       [](RunConfig& c, const std::string& v) { c.attn_targets = split(v, '|'); }},
  };
  return table;
}

#undef LTD_REF

const Field& field(const std::string& key) {
  for (const Field& f : fields()) {
    if (key == f.key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() {
  model.n_classes = 0;
  model.vocab_size = 0;
  trainer.optimizer.learning_rate = 1e-3;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.emplace_back(f.key);
  return out;
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ConfigError("a seed is required: pass --seed N or set seed=N in the config");
  return *seed;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, std::string> kv;
  try {
    kv = parse_key_values(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [key, value] : kv) cfg.set(key, value);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace ltd
