// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Language-targeted detector: patch embedder, transformer encoder, the
// conditional decoder and the shared prediction heads.
//
// The decoder runs over N object queries followed by K target queries.
// Each layer applies
//   (a) joint self-attention over all N + K rows (padded targets masked as keys),
//   (b) target-attention into the encoder memory issued by the N object rows
//       only; target rows pass through untouched,
//   (c) a position-wise FFN on every row,
// all pre-norm with residuals. Only the object rows reach the heads.

#pragma once

#include <cstdint>
#include <istream>
#include <random>
#include <vector>

#include "ltd/image.hpp"
#include "ltd/optim.hpp"
#include "ltd/tensor.hpp"
#include "ltd/tokenizer.hpp"

namespace ltd {

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int d_model = 64;
  int n_heads = 4;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int n_object_queries = 16;
  int n_target_queries = 8;
  int n_classes = 3;
  int vocab_size = 8;
  int ffn_dim = 128;
  int max_targets_per_sample = 4;

  // Throws std::invalid_argument on the first violated invariant.
  void validate() const;

  int grid_size() const { return image_size / patch_size; }
  int sequence_length() const { return grid_size() * grid_size(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int no_object_class() const { return n_classes; }
  int no_target_index() const { return max_targets_per_sample; }
};

// Model output, one row per object query.
struct DetectionSet {
  Tensor boxes;                // N × 4, normalized (cx, cy, w, h)
  Tensor class_logits;         // N × (n_classes + 1), last = no-object
  Tensor target_index_logits;  // N × (max_targets + 1), last = no-target

  std::size_t size() const { return boxes.defined() ? boxes.dim(0) : 0; }
};

struct QuerySet {
  Tensor object_queries;  // N × d
  Tensor target_queries;  // K × d
  std::vector<bool> target_pad_mask;
};

// Softmax weights per decoder layer and head.
struct AttentionCapture {
  std::vector<std::vector<Tensor>> self_attention;    // (N+K) × (N+K)
  std::vector<std::vector<Tensor>> target_attention;  // N × L
};

// Full N + K row states around each decoder sub-layer.
struct DecoderLayerTrace {
  Tensor input;
  Tensor after_self_attention;
  Tensor after_target_attention;
  Tensor output;
};

struct DecodeOptions {
  // Diagnostic: forbid object rows from attending to target rows in (a).
  bool block_object_to_target = false;
  AttentionCapture* capture = nullptr;
  std::vector<DecoderLayerTrace>* trace = nullptr;
};

struct ForwardResult {
  DetectionSet detections;
  AttentionCapture attention;
};

// Fixed 2-D sine encoding: first d/2 channels encode the row, the rest the
// column; within each half channel 2i is sin and 2i+1 is cos of
// position / 10000^(2i / (d/2)).
Tensor positional_encoding(int length, int d_model, int grid_h, int grid_w);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  // Per-patch linear embedding, L × d, without positional information.
  Tensor extract_features(const Image& image) const;
  Tensor encode(const Tensor& input) const;
  QuerySet build_queries(const TokenSequence& tokens) const;
  // Returns the final N object-row states.
  Tensor decode(const Tensor& memory, const QuerySet& queries, const DecodeOptions& options = {}) const;
  DetectionSet predict_heads(const Tensor& object_states) const;

  ForwardResult forward(const Image& image, const TokenSequence& tokens, bool capture_attention = false) const;

  // Reads "word v1 ... vd" lines and overwrites the matching token-embedding
  // rows. Returns the number of rows replaced.
  std::size_t load_token_embeddings(std::istream& in, const Vocabulary& vocab);

 private:
  void add_linear(const std::string& prefix, int in, int out, std::mt19937_64& rng);
  void add_attention(const std::string& prefix, std::mt19937_64& rng);
  void add_norm(const std::string& prefix);

  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor norm(const Tensor& x, const std::string& prefix) const;
  Tensor ffn(const Tensor& x, const std::string& prefix) const;
  Tensor attention(const Tensor& queries, const Tensor& keys, const std::string& prefix,
                   const std::vector<bool>* allowed, std::vector<Tensor>* weights) const;

  ModelConfig config_;
  ParameterStore params_;
  Tensor positional_;
};

}  // namespace ltd
