// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0
//
// LTD-CKPT-1 checkpoints: a text manifest plus one flat little-endian
// float64 blob stored next to it as "<manifest>.bin".
//
//   LTD-CKPT-1
//   blob <file name of the blob>
//   meta <key> <value>
//   param <name> <dims joined by ',' or 'scalar'> <byte offset>

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ltd/tensor.hpp"

namespace ltd {

inline constexpr const char* kCheckpointVersion = "LTD-CKPT-1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

}  // namespace ltd
