// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "ltd/image.hpp"
#include "ltd/model.hpp"

namespace ltd::testing {

// Small enough for finite differences, large enough to exercise every path.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 2;
  c.n_object_queries = 4;
  c.n_target_queries = 6;
  c.n_classes = 3;
  c.vocab_size = 8;
  c.ffn_dim = 12;
  c.max_targets_per_sample = 3;
  return c;
}

inline Image random_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img(size, size);
  for (double& v : img.pixels) v = unit(rng);
  return img;
}

}  // namespace ltd::testing
