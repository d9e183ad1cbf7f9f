#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

// Interleaved RGB image with values in [0,1]. Quantization to bytes happens
// only when a file is written.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> pixels;  // height*width*3, row-major, channel-last

  Image() = default;
  Image(int64_t h, int64_t w) : height(h), width(w) {
    pixels.assign(static_cast<size_t>(h * w * 3), 0.0f);
  }

  float& at(int64_t y, int64_t x, int64_t c) {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  float at(int64_t y, int64_t x, int64_t c) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }

  template <typename T>
  Tensor<T> tensor() const {
    Tensor<T> t({height, width, 3});
    for (size_t i = 0; i < pixels.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<T>(pixels[i]);
    return t;
  }
};

struct DatasetSpec {
  int64_t count = 1;
  uint64_t seed = 0;
  int64_t min_px = 32;
  int64_t max_px = 64;
  double min_aspect = 1.0;
  double max_aspect = 1.0;
  int64_t class_count = 1;
};

struct LabeledImage {
  Image image;
  int64_t label = 0;
};

// Binary PPM (P6) with maxval up to 255. load scales bytes by 1/maxval; save
// quantizes by round(v*255) and clamps out-of-range values to [0,255].
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

// Dispatch on file extension; only .ppm is supported.
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path);

// Deterministic procedural dataset. Each class gets its own pattern family
// (stripes, blobs, checkers, rectangles) with per-image variation, smooth
// enough that a small autoencoder can learn to reconstruct it. Labels cycle
// through 0..class_count-1.
std::vector<LabeledImage> generate_synthetic(const DatasetSpec& spec);

}  // namespace vitae
