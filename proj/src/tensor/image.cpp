// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include "ltd/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace ltd {

namespace {

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is) {
  std::string token;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token += c;
  }
  return token;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageError("cannot write " + path.string());
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(quantize(image.pixels[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ImageError("short write on " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open " + path.string());
  if (header_token(is) != "P6") throw ImageError(path.string() + ": not a binary PPM");
  const int w = std::stoi(header_token(is));
  const int h = std::stoi(header_token(is));
  const int maxval = std::stoi(header_token(is));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw ImageError(path.string() + ": unsupported PPM header");
  Image image(w, h);
  std::vector<char> bytes(image.pixels.size());
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw ImageError(path.string() + ": truncated pixels");
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / maxval;
  }
  return image;
}

void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw ImageError("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageError("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) os.put(static_cast<char>(quantize(v)));
}

}  // namespace ltd
