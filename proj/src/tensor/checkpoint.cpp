// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ltd {

namespace {

std::string encode_shape(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(shape[i]);
  }
  return out;
}

Shape decode_shape(const std::string& text) {
  Shape shape;
  if (text == "scalar") return shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) shape.push_back(std::stoull(part));
  return shape;
}

void write_le(std::ostream& os, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  os.write(bytes, 8);
}

double read_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& ckpt) {
  std::filesystem::path blob = manifest;
  blob += ".bin";
  std::ofstream bin(blob, std::ios::binary | std::ios::trunc);
  std::ofstream man(manifest, std::ios::trunc);
  if (!bin || !man) throw CheckpointError("cannot write checkpoint " + manifest.string());
  man << kCheckpointVersion << '\n';
  man << "blob " << blob.filename().string() << '\n';
  for (const auto& [key, value] : ckpt.meta) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw CheckpointError("checkpoint meta entries may not contain whitespace keys or newlines: " + key);
    }
    man << "meta " << key << ' ' << value << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    man << "param " << name << ' ' << encode_shape(t.shape()) << ' ' << offset << '\n';
    for (double v : t.data()) write_le(bin, v);
    offset += 8 * t.numel();
  }
  if (!bin || !man) throw CheckpointError("short write on checkpoint " + manifest.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream man(manifest);
  if (!man) throw CheckpointError("missing checkpoint " + manifest.string());
  std::string header;
  std::getline(man, header);
  if (header != kCheckpointVersion) {
    throw CheckpointError(manifest.string() + ": expected header " + kCheckpointVersion + ", got '" + header + "'");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  Checkpoint ckpt;
  std::string blob_name;
  std::string line;
  int line_no = 1;
  while (std::getline(man, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "blob") {
      ls >> blob_name;
    } else if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
    } else if (kind == "param") {
      Entry e;
      std::string shape;
      ls >> e.name >> shape >> e.offset;
      if (!ls) throw CheckpointError(manifest.string() + ":" + std::to_string(line_no) + ": malformed param line");
      e.shape = decode_shape(shape);
      entries.push_back(std::move(e));
    } else {
      throw CheckpointError(manifest.string() + ":" + std::to_string(line_no) + ": unknown record '" + kind + "'");
    }
  }
  if (blob_name.empty()) throw CheckpointError(manifest.string() + ": no blob record");
  const auto blob_path = manifest.parent_path() / blob_name;
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint blob " + blob_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  for (const auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + 8 * n > bytes.size()) {
      throw CheckpointError(manifest.string() + ": tensor " + e.name + " extends past end of blob");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_le(bytes.data() + e.offset + 8 * i);
    ckpt.tensors.emplace_back(e.name, Tensor::from(e.shape, std::move(values)));
  }
  return ckpt;
}

}  // namespace ltd
