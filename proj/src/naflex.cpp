#include "vitae/naflex.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vitae {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// round(num/den) for non-negative num, positive den, ties up
int64_t round_div(int64_t num, int64_t den) { return (2 * num + den) / (2 * den); }

}  // namespace

GridFit fit_grid(int64_t h, int64_t w, int64_t p, int64_t budget) {
  if (h < 1 || w < 1 || p < 1) throw std::runtime_error("bad dimensions");
  if (budget < 1) throw std::runtime_error("token budget must be at least 1");

  int64_t best_num = -1, best_den = 1;
  auto consider = [&](int64_t num, int64_t den) {
    if (num > den) return;  // never upscale
    int64_t gh = ceil_div(num * h, den * p);
    int64_t gw = ceil_div(num * w, den * p);
    if (gh * gw > budget) return;
    if (best_num < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
    }
  };
  consider(1, 1);
  for (int64_t a = 1; a * p <= h; ++a) consider(a * p, h);
  for (int64_t b = 1; b * p <= w; ++b) consider(b * p, w);
  // Smallest candidate gives a 1x1 grid, so a budget >= 1 always fits.
  if (best_num < 0) {
    int64_t m = std::max(h, w);
    best_num = std::min<int64_t>(p, m);
    best_den = m;
  }

  GridFit fit;
  fit.grid_h = ceil_div(best_num * h, best_den * p);
  fit.grid_w = ceil_div(best_num * w, best_den * p);
  fit.resized_h = std::max<int64_t>(1, round_div(best_num * h, best_den));
  fit.resized_w = std::max<int64_t>(1, round_div(best_num * w, best_den));
  fit.scale = static_cast<double>(best_num) / static_cast<double>(best_den);
  return fit;
}

template <typename T>
std::shared_ptr<GatherPlan<T>> bilinear_plan(int64_t ih, int64_t iw, int64_t oh,
                                             int64_t ow) {
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->out_shape = {oh, ow, 3};
  plan->in_numel = ih * iw * 3;
  plan->offset.reserve(static_cast<size_t>(oh * ow * 3) + 1);
  plan->offset.push_back(0);
  double sy = static_cast<double>(ih) / static_cast<double>(oh);
  double sx = static_cast<double>(iw) / static_cast<double>(ow);
  for (int64_t y = 0; y < oh; ++y) {
    double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(src_y));
    double fy = src_y - static_cast<double>(y0);
    int64_t ya = std::clamp<int64_t>(y0, 0, ih - 1);
    int64_t yb = std::clamp<int64_t>(y0 + 1, 0, ih - 1);
    for (int64_t x = 0; x < ow; ++x) {
      double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(src_x));
      double fx = src_x - static_cast<double>(x0);
      int64_t xa = std::clamp<int64_t>(x0, 0, iw - 1);
      int64_t xb = std::clamp<int64_t>(x0 + 1, 0, iw - 1);
      double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
      double w10 = fy * (1 - fx), w11 = fy * fx;
      for (int64_t c = 0; c < 3; ++c) {
        auto tap = [&](int64_t yy, int64_t xx, double wt) {
          if (wt == 0.0) return;
          plan->index.push_back(static_cast<int32_t>((yy * iw + xx) * 3 + c));
          plan->weight.push_back(static_cast<T>(wt));
        };
        tap(ya, xa, w00);
        tap(ya, xb, w01);
        tap(yb, xa, w10);
        tap(yb, xb, w11);
        plan->offset.push_back(static_cast<int64_t>(plan->index.size()));
      }
    }
  }
  return plan;
}

template <typename T>
std::shared_ptr<GatherPlan<T>> crop_plan(int64_t ih, int64_t iw, int64_t oh,
                                         int64_t ow) {
  return offset_crop_plan<T>(ih, iw, 0, 0, oh, ow);
}

template <typename T>
std::shared_ptr<GatherPlan<T>> offset_crop_plan(int64_t ih, int64_t iw, int64_t y0,
                                                int64_t x0, int64_t oh, int64_t ow) {
  if (y0 < 0 || x0 < 0 || y0 + oh > ih || x0 + ow > iw)
    throw std::runtime_error("crop outside source");
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->out_shape = {oh, ow, 3};
  plan->in_numel = ih * iw * 3;
  plan->offset.push_back(0);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        plan->index.push_back(
            static_cast<int32_t>(((y0 + y) * iw + x0 + x) * 3 + c));
        plan->weight.push_back(T(1));
        plan->offset.push_back(static_cast<int64_t>(plan->index.size()));
      }
  return plan;
}

template <typename T>
std::shared_ptr<GatherPlan<T>> patchify_plan(int64_t h, int64_t w, int64_t p) {
  if (h % p != 0 || w % p != 0) throw std::runtime_error("dims not divisible by patch");
  int64_t gh = h / p, gw = w / p;
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->out_shape = {gh * gw, p * p * 3};
  plan->in_numel = h * w * 3;
  plan->offset.push_back(0);
  for (int64_t t = 0; t < gh * gw; ++t) {
    int64_t gy = t / gw, gx = t % gw;
    for (int64_t dy = 0; dy < p; ++dy)
      for (int64_t dx = 0; dx < p; ++dx)
        for (int64_t c = 0; c < 3; ++c) {
          int64_t src = ((gy * p + dy) * w + gx * p + dx) * 3 + c;
          plan->index.push_back(static_cast<int32_t>(src));
          plan->weight.push_back(T(1));
          plan->offset.push_back(static_cast<int64_t>(plan->index.size()));
        }
  }
  return plan;
}

template <typename T>
std::shared_ptr<GatherPlan<T>> unpatchify_plan(int64_t grid_h, int64_t grid_w,
                                               int64_t p) {
  int64_t h = grid_h * p, w = grid_w * p;
  auto plan = std::make_shared<GatherPlan<T>>();
  plan->out_shape = {h, w, 3};
  plan->in_numel = grid_h * grid_w * p * p * 3;
  plan->offset.push_back(0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        int64_t t = (y / p) * grid_w + x / p;
        int64_t within = ((y % p) * p + x % p) * 3 + c;
        plan->index.push_back(static_cast<int32_t>(t * p * p * 3 + within));
        plan->weight.push_back(T(1));
        plan->offset.push_back(static_cast<int64_t>(plan->index.size()));
      }
  return plan;
}

template <typename T>
std::vector<T> apply_plan(const GatherPlan<T>& plan, const T* in) {
  int64_t n = Tensor<T>::numel_of(plan.out_shape);
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t m = 0; m < n; ++m) {
    T acc = T(0);
    for (int64_t e = plan.offset[static_cast<size_t>(m)];
         e < plan.offset[static_cast<size_t>(m) + 1]; ++e)
      acc += plan.weight[static_cast<size_t>(e)] * in[plan.index[static_cast<size_t>(e)]];
    out[static_cast<size_t>(m)] = acc;
  }
  return out;
}

template std::shared_ptr<GatherPlan<float>> bilinear_plan(int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<double>> bilinear_plan(int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<float>> crop_plan(int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<double>> crop_plan(int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<float>> offset_crop_plan(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<double>> offset_crop_plan(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<float>> patchify_plan(int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<double>> patchify_plan(int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<float>> unpatchify_plan(int64_t, int64_t, int64_t);
template std::shared_ptr<GatherPlan<double>> unpatchify_plan(int64_t, int64_t, int64_t);
template std::vector<float> apply_plan(const GatherPlan<float>&, const float*);
template std::vector<double> apply_plan(const GatherPlan<double>&, const double*);

PaddedImage resize_pad(const Image& img, const GridFit& fit, int64_t p) {
  if (fit.grid_h < 1 || fit.grid_w < 1 || fit.resized_h > fit.grid_h * p ||
      fit.resized_w > fit.grid_w * p)
    throw std::runtime_error("grid fit does not match image");
  int64_t ch = fit.grid_h * p, cw = fit.grid_w * p;
  PaddedImage out;
  out.canvas = Image(ch, cw);
  std::fill(out.canvas.pixels.begin(), out.canvas.pixels.end(), 0.5f);
  out.mask.assign(static_cast<size_t>(ch * cw), 0);

  auto plan = bilinear_plan<float>(img.height, img.width, fit.resized_h, fit.resized_w);
  std::vector<float> resized = apply_plan(*plan, img.pixels.data());
  for (int64_t y = 0; y < fit.resized_h; ++y) {
    for (int64_t x = 0; x < fit.resized_w; ++x) {
      for (int64_t c = 0; c < 3; ++c)
        out.canvas.at(y, x, c) = resized[static_cast<size_t>((y * fit.resized_w + x) * 3 + c)];
      out.mask[static_cast<size_t>(y * cw + x)] = 1;
    }
  }
  return out;
}

Tensor<float> patchify(const Image& padded, int64_t p) {
  auto plan = patchify_plan<float>(padded.height, padded.width, p);
  Tensor<float> tokens(plan->out_shape);
  tokens.data = apply_plan(*plan, padded.pixels.data());
  return tokens;
}

Image unpatchify_image(const Tensor<float>& tokens, const GridFit& grid, int64_t p) {
  if (tokens.rows() != grid.grid_h * grid.grid_w || tokens.cols() != p * p * 3)
    throw std::runtime_error("token array does not match grid");
  auto plan = unpatchify_plan<float>(grid.grid_h, grid.grid_w, p);
  Image img(grid.grid_h * p, grid.grid_w * p);
  std::vector<float> out = apply_plan(*plan, tokens.ptr());
  img.pixels = std::move(out);
  return img;
}

PackedImage pack_image(const Image& img, int64_t p, int64_t budget) {
  PackedImage packed;
  packed.grid = fit_grid(img.height, img.width, p, budget);
  packed.patch = p;
  PaddedImage padded = resize_pad(img, packed.grid, p);
  packed.tokens = patchify(padded.canvas, p);
  packed.mask = std::move(padded.mask);
  return packed;
}

double token_pad_fraction(const PackedImage& packed) {
  double canvas = static_cast<double>(packed.grid.grid_h * packed.patch) *
                  static_cast<double>(packed.grid.grid_w * packed.patch);
  double content = static_cast<double>(packed.grid.resized_h) *
                   static_cast<double>(packed.grid.resized_w);
  return 1.0 - content / canvas;
}

}  // namespace vitae
