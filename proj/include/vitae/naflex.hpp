#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "vitae/graph.hpp"
#include "vitae/image.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

// Result of fitting an image into a token budget: the token grid, the
// downscaled pixel dimensions (never upscaled, at least 1), and the scale.
struct GridFit {
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  int64_t resized_h = 0;
  int64_t resized_w = 0;
  double scale = 1.0;
};

// Image packed for the encoder: one token per p*p patch of the padded canvas,
// flattened row-major channel-last, plus a per-canvas-pixel content mask
// (1 = real content, 0 = gray padding).
struct PackedImage {
  Tensor<float> tokens;  // [grid_h*grid_w, p*p*3]
  std::vector<uint8_t> mask;
  GridFit grid;
  int64_t patch = 0;
};

// Largest scale s <= 1 with ceil(s*h/p) * ceil(s*w/p) <= budget. The scan is
// exact: candidate scales are the rationals a*p/h and b*p/w where a ceiling
// changes value, compared by cross multiplication, so no float rounding can
// pick an infeasible grid.
GridFit fit_grid(int64_t h, int64_t w, int64_t p, int64_t budget);

struct PaddedImage {
  Image canvas;  // (grid_h*p) x (grid_w*p), gray 0.5 outside the content box
  std::vector<uint8_t> mask;
};

// Bilinear resize to (resized_h, resized_w), placed top-left on the gray
// canvas. fit must have been produced for this image's dimensions.
PaddedImage resize_pad(const Image& img, const GridFit& fit, int64_t p);

// Canvas dims must be divisible by p. Patches in row-major grid order; each
// token is the patch flattened row-major channel-last.
Tensor<float> patchify(const Image& padded, int64_t p);
Image unpatchify_image(const Tensor<float>& tokens, const GridFit& grid, int64_t p);

PackedImage pack_image(const Image& img, int64_t p, int64_t budget);

// Fraction of canvas pixels that are padding, in [0,1).
double token_pad_fraction(const PackedImage& packed);

// Gather plans shared by preprocessing and the differentiable graph. All
// operate on [H,W,3] buffers flattened row-major (or [L, p*p*3] for tokens).
template <typename T>
std::shared_ptr<GatherPlan<T>> bilinear_plan(int64_t ih, int64_t iw, int64_t oh,
                                             int64_t ow);
template <typename T>
std::shared_ptr<GatherPlan<T>> crop_plan(int64_t ih, int64_t iw, int64_t oh,
                                         int64_t ow);
template <typename T>
std::shared_ptr<GatherPlan<T>> offset_crop_plan(int64_t ih, int64_t iw, int64_t y0,
                                                int64_t x0, int64_t oh, int64_t ow);
template <typename T>
std::shared_ptr<GatherPlan<T>> patchify_plan(int64_t h, int64_t w, int64_t p);
template <typename T>
std::shared_ptr<GatherPlan<T>> unpatchify_plan(int64_t grid_h, int64_t grid_w,
                                               int64_t p);

// Applies a plan outside any graph.
template <typename T>
std::vector<T> apply_plan(const GatherPlan<T>& plan, const T* in);

}  // namespace vitae
