// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/model.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ltd {

namespace {

std::string layer_prefix(const char* stack, int layer) { return std::string(stack) + "." + std::to_string(layer); }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 4 != 0) fail("d_model must be divisible by 4 for the 2-D positional encoding");
  if (n_encoder_layers < 0 || n_decoder_layers < 0) fail("layer counts must be non-negative");
  if (n_object_queries <= 0) fail("n_object_queries must be positive");
  if (n_target_queries < 2) fail("n_target_queries must leave room for [CLS] and [SEP]");
  if (n_classes <= 0) fail("n_classes must be positive");
  if (vocab_size <= Vocabulary::kUnk) fail("vocab_size must include the special tokens");
  if (ffn_dim <= 0) fail("ffn_dim must be positive");
  if (max_targets_per_sample <= 0) fail("max_targets_per_sample must be positive");
}

Tensor positional_encoding(int length, int d_model, int grid_h, int grid_w) {
  if (grid_h * grid_w != length) throw DimensionError("positional_encoding: grid does not cover the sequence");
  if (d_model % 4 != 0) throw DimensionError("positional_encoding: d_model must be divisible by 4");
  const int half = d_model / 2;
  std::vector<double> values(static_cast<std::size_t>(length) * d_model);
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      double* row = values.data() + static_cast<std::size_t>(y * grid_w + x) * d_model;
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, 2.0 * (i / 2) / half);
        const double ay = y / freq, ax = x / freq;
        row[i] = (i % 2 == 0) ? std::sin(ay) : std::cos(ay);
        row[half + i] = (i % 2 == 0) ? std::sin(ax) : std::cos(ax);
      }
    }
  }
  return Tensor::from({static_cast<std::size_t>(length), static_cast<std::size_t>(d_model)}, std::move(values));
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.d_model;
  const auto ud = static_cast<std::size_t>(d);

  auto normal = [&rng](std::size_t rows, std::size_t cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = dist(rng);
    return Tensor::from({rows, cols}, std::move(v));
  };

  add_linear("backbone.patch_proj", config_.patch_dim(), d, rng);
  for (int l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string p = layer_prefix("encoder", l);
    add_norm(p + ".norm1");
    add_attention(p + ".self_attn", rng);
    add_norm(p + ".norm2");
    add_linear(p + ".ffn1", d, config_.ffn_dim, rng);
    add_linear(p + ".ffn2", config_.ffn_dim, d, rng);
  }
  if (config_.n_encoder_layers > 0) add_norm("encoder.norm");

  const auto n_queries = static_cast<std::size_t>(config_.n_object_queries + config_.n_target_queries);
  params_.add("query_embed", normal(n_queries, ud, 1.0));
  params_.add("token_embed", normal(static_cast<std::size_t>(config_.vocab_size), ud, 1.0));
  params_.add("segment_embed", normal(static_cast<std::size_t>(config_.max_targets_per_sample), ud, 1.0));

  for (int l = 0; l < config_.n_decoder_layers; ++l) {
    const std::string p = layer_prefix("decoder", l);
    add_norm(p + ".norm1");
    add_attention(p + ".self_attn", rng);
    add_norm(p + ".norm2");
    add_attention(p + ".target_attn", rng);
    add_norm(p + ".norm3");
    add_linear(p + ".ffn1", d, config_.ffn_dim, rng);
    add_linear(p + ".ffn2", config_.ffn_dim, d, rng);
  }
  add_norm("decoder.norm");

  add_linear("head.box0", d, d, rng);
  add_linear("head.box1", d, d, rng);
  add_linear("head.box2", d, 4, rng);
  add_linear("head.class", d, config_.n_classes + 1, rng);
  add_linear("head.target", d, config_.max_targets_per_sample + 1, rng);

  positional_ = positional_encoding(config_.sequence_length(), d, config_.grid_size(), config_.grid_size());
}

// Xavier-uniform weight, zero bias.
void Model::add_linear(const std::string& prefix, int in, int out, std::mt19937_64& rng) {
  const auto rows = static_cast<std::size_t>(in), cols = static_cast<std::size_t>(out);
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> w(rows * cols);
  for (double& x : w) x = dist(rng);
  params_.add(prefix + ".weight", Tensor::from({rows, cols}, std::move(w)));
  params_.add(prefix + ".bias", Tensor::zeros({cols}));
}

void Model::add_attention(const std::string& prefix, std::mt19937_64& rng) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(prefix + proj, config_.d_model, config_.d_model, rng);
}

void Model::add_norm(const std::string& prefix) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  params_.add(prefix + ".gain", Tensor::full({d}, 1.0));
  params_.add(prefix + ".bias", Tensor::zeros({d}));
}

Tensor Model::linear(const Tensor& x, const std::string& prefix) const {
  return add_bias(matmul(x, params_.get(prefix + ".weight")), params_.get(prefix + ".bias"));
}

Tensor Model::norm(const Tensor& x, const std::string& prefix) const {
  return layer_norm(x, params_.get(prefix + ".gain"), params_.get(prefix + ".bias"));
}

Tensor Model::ffn(const Tensor& x, const std::string& prefix) const {
  return linear(relu(linear(x, prefix + ".ffn1")), prefix + ".ffn2");
}

Tensor Model::attention(const Tensor& queries, const Tensor& keys, const std::string& prefix,
                        const std::vector<bool>* allowed, std::vector<Tensor>* weights) const {
  const Tensor q = linear(queries, prefix + ".q");
  const Tensor k = linear(keys, prefix + ".k");
  const Tensor v = linear(keys, prefix + ".v");
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const std::size_t head_dim = static_cast<std::size_t>(config_.d_model) / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice(q, 1, h * head_dim, (h + 1) * head_dim);
    const Tensor kh = slice(k, 1, h * head_dim, (h + 1) * head_dim);
    const Tensor vh = slice(v, 1, h * head_dim, (h + 1) * head_dim);
    const Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    const Tensor w = allowed ? masked_softmax(scores, *allowed) : softmax(scores, 1);
    if (weights) weights->push_back(w.detach());
    outputs.push_back(matmul(w, vh));
  }
  return linear(concat(outputs, 1), prefix + ".o");
}

Tensor Model::extract_features(const Image& image) const {
  if (image.width != config_.image_size || image.height != config_.image_size) {
    throw DimensionError("extract_features: image is " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + ", model expects " + std::to_string(config_.image_size));
  }
  const int p = config_.patch_size, grid = config_.grid_size();
  const auto patch_dim = static_cast<std::size_t>(config_.patch_dim());
  std::vector<double> patches(static_cast<std::size_t>(config_.sequence_length()) * patch_dim);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      double* dst = patches.data() + static_cast<std::size_t>(gy * grid + gx) * patch_dim;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < 3; ++c) *dst++ = image.at(gx * p + px, gy * p + py, c);
    }
  }
  const Tensor input = Tensor::from({static_cast<std::size_t>(config_.sequence_length()), patch_dim}, std::move(patches));
  return linear(input, "backbone.patch_proj");
}

Tensor Model::encode(const Tensor& input) const {
  Tensor x = input;
  for (int l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string p = layer_prefix("encoder", l);
    const Tensor h = norm(x, p + ".norm1");
    x = add(x, attention(h, h, p + ".self_attn", nullptr, nullptr));
    x = add(x, ffn(norm(x, p + ".norm2"), p));
  }
  if (config_.n_encoder_layers > 0) x = norm(x, "encoder.norm");
  return x;
}

QuerySet Model::build_queries(const TokenSequence& tokens) const {
  const auto n = static_cast<std::size_t>(config_.n_object_queries);
  const auto k = static_cast<std::size_t>(config_.n_target_queries);
  if (tokens.token_ids.size() != k || tokens.segment_ids.size() != k || tokens.pad_mask.size() != k) {
    throw DimensionError("build_queries: token sequence length " + std::to_string(tokens.token_ids.size()) +
                         " != n_target_queries " + std::to_string(k));
  }
  for (int s : tokens.segment_ids) {
    if (s < 0 || s >= config_.max_targets_per_sample) throw LookupError("build_queries: segment id out of range");
  }
  const Tensor& table = params_.get("query_embed");
  std::vector<int> object_slots(n), target_slots(k);
  for (std::size_t i = 0; i < n; ++i) object_slots[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < k; ++i) target_slots[i] = static_cast<int>(n + i);

  QuerySet q;
  // The object placeholder is all zeros, so the query embedding is the query.
  q.object_queries = embedding_lookup(table, object_slots);
  q.target_queries = add(add(embedding_lookup(params_.get("token_embed"), tokens.token_ids),
                             embedding_lookup(params_.get("segment_embed"), tokens.segment_ids)),
                         embedding_lookup(table, target_slots));
  q.target_pad_mask = tokens.pad_mask;
  return q;
}

Tensor Model::decode(const Tensor& memory, const QuerySet& queries, const DecodeOptions& options) const {
  const auto n = queries.object_queries.dim(0);
  const auto k = queries.target_queries.dim(0);
  if (queries.target_pad_mask.size() != k) throw DimensionError("decode: pad mask does not match target queries");
  if (memory.rank() != 2 || memory.dim(1) != static_cast<std::size_t>(config_.d_model)) {
    throw DimensionError("decode: memory has shape " + shape_to_string(memory.shape()));
  }
  const std::size_t rows = n + k;
  std::vector<bool> allowed(rows * rows, true);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      if (queries.target_pad_mask[c]) allowed[r * rows + n + c] = false;
      if (options.block_object_to_target && r < n) allowed[r * rows + n + c] = false;
    }
  }

  const Tensor parts[] = {queries.object_queries, queries.target_queries};
  Tensor x = concat(parts, 0);
  for (int l = 0; l < config_.n_decoder_layers; ++l) {
    const std::string p = layer_prefix("decoder", l);
    std::vector<Tensor>* self_w = nullptr;
    std::vector<Tensor>* target_w = nullptr;
    if (options.capture) {
      options.capture->self_attention.emplace_back();
      options.capture->target_attention.emplace_back();
      self_w = &options.capture->self_attention.back();
      target_w = &options.capture->target_attention.back();
    }
    DecoderLayerTrace trace;
    if (options.trace) trace.input = x.detach();

    const Tensor h = norm(x, p + ".norm1");
    x = add(x, attention(h, h, p + ".self_attn", &allowed, self_w));
    if (options.trace) trace.after_self_attention = x.detach();

    Tensor objects = slice(x, 0, 0, n);
    const Tensor targets = slice(x, 0, n, rows);
    objects = add(objects, attention(norm(objects, p + ".norm2"), memory, p + ".target_attn", nullptr, target_w));
    const Tensor merged[] = {objects, targets};
    x = concat(merged, 0);
    if (options.trace) trace.after_target_attention = x.detach();

    x = add(x, ffn(norm(x, p + ".norm3"), p));
    if (options.trace) {
      trace.output = x.detach();
      options.trace->push_back(std::move(trace));
    }
  }
  return norm(slice(x, 0, 0, n), "decoder.norm");
}

DetectionSet Model::predict_heads(const Tensor& object_states) const {
  DetectionSet out;
  Tensor h = relu(linear(object_states, "head.box0"));
  h = relu(linear(h, "head.box1"));
  out.boxes = sigmoid(linear(h, "head.box2"));
  out.class_logits = linear(object_states, "head.class");
  out.target_index_logits = linear(object_states, "head.target");
  return out;
}

ForwardResult Model::forward(const Image& image, const TokenSequence& tokens, bool capture_attention) const {
  ForwardResult result;
  const Tensor memory = encode(add(extract_features(image), positional_));
  DecodeOptions options;
  if (capture_attention) options.capture = &result.attention;
  result.detections = predict_heads(decode(memory, build_queries(tokens), options));
  return result;
}

std::size_t Model::load_token_embeddings(std::istream& in, const Vocabulary& vocab) {
  Tensor& table = params_.get("token_embed");
  const auto d = static_cast<std::size_t>(config_.d_model);
  auto data = table.mutable_data();
  std::size_t replaced = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<double> values;
    double v;
    while (ls >> v) values.push_back(v);
    if (values.size() != d) {
      throw DimensionError("token embeddings line " + std::to_string(line_no) + ": expected " + std::to_string(d) +
                           " values, got " + std::to_string(values.size()));
    }
    const int id = vocab.id(word);
    if (id == Vocabulary::kUnk && word != "[UNK]") continue;
    if (static_cast<std::size_t>(id) >= table.dim(0)) continue;
    std::copy(values.begin(), values.end(), data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d));
    ++replaced;
  }
  return replaced;
}

}  // namespace ltd
