#include "vitae/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace vitae {

LossWeights loss_preset(const std::string& name) {
  LossWeights w;
  if (name == "pixel") {
    w.w_ssim = 0;
    w.w_perc = 0;
  } else if (name == "pixel+ssim") {
    w.w_perc = 0;
  } else if (name == "pixel+ssim+perc500") {
    w.w_perc = 500;
  } else if (name == "pixel+ssim+perc1000") {
    w.w_perc = 1000;
  } else {
    throw std::invalid_argument("unknown loss preset: " + name);
  }
  return w;
}

std::vector<std::string> loss_preset_names() {
  return {"pixel", "pixel+ssim", "pixel+ssim+perc500", "pixel+ssim+perc1000"};
}

template <typename T>
FrozenExtractor<T>::FrozenExtractor(int64_t patch, int64_t width, int64_t depth,
                                    int heads, uint64_t seed)
    : patch_(patch), depth_(depth) {
  if (patch < 1 || width < 1 || depth < 1)
    throw std::invalid_argument("bad extractor geometry");
  cfg_.width = width;
  cfg_.heads = heads;
  // Random features need block outputs of healthy scale; the training-oriented
  // near-zero LayerScale would make every tap nearly the embedding.
  cfg_.layerscale_init = 1.0;
  taps_ = {std::max<int64_t>(1, depth / 3), std::max<int64_t>(1, 2 * depth / 3),
           depth};
  Rng rng = derive_rng(seed, {0xFEull});
  ps_.add("embed.w", normal_init<T>({width, 3 * patch * patch}, rng, 0.02));
  ps_.add("embed.b", const_init<T>({width}, 0.0));
  for (int64_t i = 0; i < depth; ++i)
    add_block_params(ps_, "block" + std::to_string(i) + ".", cfg_, rng);
}

template <typename T>
std::vector<typename Graph<T>::Id> FrozenExtractor<T>::features(
    Graph<T>& g, typename Graph<T>::Id tile) const {
  const Tensor<T>& tv = g.value(tile);
  if (tv.rank() != 3 || tv.dim(0) != tv.dim(1) || tv.dim(2) != 3)
    throw std::invalid_argument("extractor expects a square [S,S,3] tile");
  int64_t side = tv.dim(0);
  if (side % patch_ != 0)
    throw std::invalid_argument("tile side not divisible by extractor patch");
  int64_t grid = side / patch_;

  Bound<T> b = bind(g, ps_, false);
  auto ctx = make_attn_context<T>(cfg_, grid, grid, -1, g.grad_enabled());
  auto tokens = g.gather(tile, patchify_plan<T>(side, side, patch_));
  auto h = g.linear(tokens, b["embed.w"], b["embed.b"]);

  std::vector<typename Graph<T>::Id> out;
  for (int64_t i = 0; i < depth_; ++i) {
    h = block_forward(g, h, b, "block" + std::to_string(i) + ".", cfg_, ctx);
    for (int64_t t : taps_)
      if (t == i + 1) out.push_back(h);
  }
  return out;
}

template <typename T>
void FrozenExtractor<T>::load(const ParamStore<T>& external) {
  for (auto& e : ps_.entries()) {
    const Tensor<T>& src = external[e.name];
    if (src.shape != e.value.shape)
      throw std::invalid_argument("shape mismatch loading extractor weights: " +
                                  e.name);
    e.value.data = src.data;
  }
}

template <typename T>
typename Graph<T>::Id charbonnier_loss(Graph<T>& g, typename Graph<T>::Id x,
                                       typename Graph<T>::Id xhat) {
  if (g.value(x).numel() == 0) throw std::invalid_argument("empty valid region");
  return g.charbonnier(x, xhat, static_cast<T>(1e-3));
}

namespace {

template <typename T>
Tensor<T> gaussian_kernel(int64_t size, double sigma) {
  Tensor<T> k({size});
  double sum = 0;
  double mid = (static_cast<double>(size) - 1) / 2;
  for (int64_t i = 0; i < size; ++i) {
    double d = static_cast<double>(i) - mid;
    double v = std::exp(-d * d / (2 * sigma * sigma));
    k[i] = static_cast<T>(v);
    sum += v;
  }
  for (int64_t i = 0; i < size; ++i) k[i] = static_cast<T>(k[i] / sum);
  return k;
}

// x / ||x|| per row, via RMS normalization rescaled by 1/sqrt(cols)
template <typename T>
typename Graph<T>::Id l2_normalize_rows(Graph<T>& g, typename Graph<T>::Id x) {
  int64_t d = g.value(x).cols();
  auto rms = g.rmsnorm_heads(x, Graph<T>::npos, 1, static_cast<T>(1e-12));
  return g.scale(rms, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
}

}  // namespace

template <typename T>
typename Graph<T>::Id ssim_loss(Graph<T>& g, typename Graph<T>::Id x,
                                typename Graph<T>::Id xhat) {
  const int64_t win = 11;
  const T c1 = static_cast<T>(0.01 * 0.01);
  const T c2 = static_cast<T>(0.03 * 0.03);
  const Tensor<T>& xv = g.value(x);
  if (xv.rank() != 3) throw std::invalid_argument("ssim expects [H,W,3]");
  if (xv.dim(0) < win || xv.dim(1) < win)
    throw std::invalid_argument("region smaller than the ssim window");

  Tensor<T> k = gaussian_kernel<T>(win, 1.5);
  auto mu_x = g.sepconv2d(x, k);
  auto mu_y = g.sepconv2d(xhat, k);
  auto xx = g.sepconv2d(g.mul(x, x), k);
  auto yy = g.sepconv2d(g.mul(xhat, xhat), k);
  auto xy = g.sepconv2d(g.mul(x, xhat), k);

  auto mu_xx = g.mul(mu_x, mu_x);
  auto mu_yy = g.mul(mu_y, mu_y);
  auto mu_xy = g.mul(mu_x, mu_y);
  auto var_x = g.sub(xx, mu_xx);
  auto var_y = g.sub(yy, mu_yy);
  auto cov = g.sub(xy, mu_xy);

  auto num = g.mul(g.add_const(g.scale(mu_xy, T(2)), c1),
                   g.add_const(g.scale(cov, T(2)), c2));
  auto den = g.mul(g.add_const(g.add(mu_xx, mu_yy), c1),
                   g.add_const(g.add(var_x, var_y), c2));
  auto ssim_map = g.div(num, den);
  return g.add_const(g.scale(g.mean_all(ssim_map), T(-1)), T(1));
}

template <typename T>
typename Graph<T>::Id perceptual_tile_loss(Graph<T>& g, typename Graph<T>::Id x,
                                           typename Graph<T>::Id xhat,
                                           const FrozenExtractor<T>& extractor,
                                           const LossWeights& weights, Rng& rng) {
  using Id = typename Graph<T>::Id;
  const int64_t tile = weights.tile;
  if (tile % extractor.patch() != 0)
    throw std::invalid_argument("tile not divisible by extractor patch");
  if (weights.tiles_per_image < 1)
    throw std::invalid_argument("tiles_per_image must be >= 1");

  const Tensor<T>& xv = g.value(x);
  if (xv.shape != g.value(xhat).shape)
    throw std::invalid_argument("shape mismatch in perceptual loss");
  int64_t vh = xv.dim(0), vw = xv.dim(1);

  Id px = x, pxh = xhat;
  if (vh < tile || vw < tile) {
    double s = std::max(static_cast<double>(tile) / static_cast<double>(vh),
                        static_cast<double>(tile) / static_cast<double>(vw));
    int64_t rh = std::max(tile, static_cast<int64_t>(std::llround(vh * s)));
    int64_t rw = std::max(tile, static_cast<int64_t>(std::llround(vw * s)));
    auto plan = bilinear_plan<T>(vh, vw, rh, rw);
    px = g.gather(px, plan);
    pxh = g.gather(pxh, plan);
    vh = rh;
    vw = rw;
  }

  Id acc = Graph<T>::npos;
  int terms = 0;
  for (int t = 0; t < weights.tiles_per_image; ++t) {
    int64_t y0 = rng.uniform_int(vh - tile + 1);
    int64_t x0 = rng.uniform_int(vw - tile + 1);
    auto plan = offset_crop_plan<T>(vh, vw, y0, x0, tile, tile);
    auto fx = extractor.features(g, g.gather(px, plan));
    auto fxh = extractor.features(g, g.gather(pxh, plan));
    for (size_t k = 0; k < fx.size(); ++k) {
      auto d = g.mse(l2_normalize_rows(g, fx[k]), l2_normalize_rows(g, fxh[k]));
      acc = acc == Graph<T>::npos ? d : g.add(acc, d);
      ++terms;
    }
  }
  return g.scale(acc, static_cast<T>(1.0 / terms));
}

template <typename T>
LossBreakdown<T> total_loss(Graph<T>& g, typename Graph<T>::Id x,
                            typename Graph<T>::Id xhat,
                            typename Graph<T>::Id reg_loss,
                            const FrozenExtractor<T>* extractor,
                            const LossWeights& weights, Rng& rng) {
  using Id = typename Graph<T>::Id;
  if (weights.w_char < 0 || weights.w_ssim < 0 || weights.w_perc < 0)
    throw std::invalid_argument("loss weights must be >= 0");

  LossBreakdown<T> b;
  Id acc = Graph<T>::npos;
  auto take = [&](Id term, double w, const char* name) {
    double v = static_cast<double>(g.value(term)[0]);
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite ") + name + " loss");
    Id weighted = w == 1.0 ? term : g.scale(term, static_cast<T>(w));
    acc = acc == Graph<T>::npos ? weighted : g.add(acc, weighted);
  };

  if (weights.w_char > 0) {
    b.charb = charbonnier_loss(g, x, xhat);
    take(b.charb, weights.w_char, "charbonnier");
  }
  if (weights.w_ssim > 0) {
    b.ssim = ssim_loss(g, x, xhat);
    take(b.ssim, weights.w_ssim, "ssim");
  }
  if (weights.w_perc > 0) {
    if (!extractor)
      throw std::invalid_argument("perceptual weight set but no extractor given");
    b.perc = perceptual_tile_loss(g, x, xhat, *extractor, weights, rng);
    take(b.perc, weights.w_perc, "perceptual");
  }
  if (reg_loss != Graph<T>::npos) {
    b.reg = reg_loss;
    take(b.reg, 1.0, "regularization");
  }
  b.total = acc == Graph<T>::npos ? g.leaf(Tensor<T>({1}, T(0))) : acc;
  return b;
}

template <typename T>
LossValues loss_values(const Graph<T>& g, const LossBreakdown<T>& b) {
  LossValues v;
  auto get = [&](typename Graph<T>::Id id) {
    return id == Graph<T>::npos ? 0.0 : static_cast<double>(g.value(id)[0]);
  };
  v.total = get(b.total);
  v.charb = get(b.charb);
  v.ssim = get(b.ssim);
  v.perc = get(b.perc);
  v.reg = get(b.reg);
  return v;
}

template <typename T>
std::pair<typename Graph<T>::Id, typename Graph<T>::Id> crop_valid(
    Graph<T>& g, typename Graph<T>::Id x_canvas, typename Graph<T>::Id xhat_canvas,
    const GridFit& fit) {
  const Tensor<T>& cv = g.value(x_canvas);
  if (fit.resized_h < 1 || fit.resized_w < 1)
    throw std::invalid_argument("empty valid region");
  auto plan = offset_crop_plan<T>(cv.dim(0), cv.dim(1), 0, 0, fit.resized_h,
                                  fit.resized_w);
  return {g.gather(x_canvas, plan), g.gather(xhat_canvas, plan)};
}

#define VITAE_INSTANTIATE_LOSSES(T)                                            \
  template class FrozenExtractor<T>;                                           \
  template Graph<T>::Id charbonnier_loss<T>(Graph<T>&, Graph<T>::Id,          \
                                            Graph<T>::Id);                     \
  template Graph<T>::Id ssim_loss<T>(Graph<T>&, Graph<T>::Id, Graph<T>::Id);  \
  template Graph<T>::Id perceptual_tile_loss<T>(                              \
      Graph<T>&, Graph<T>::Id, Graph<T>::Id, const FrozenExtractor<T>&,       \
      const LossWeights&, Rng&);                                               \
  template LossBreakdown<T> total_loss<T>(Graph<T>&, Graph<T>::Id,            \
                                          Graph<T>::Id, Graph<T>::Id,          \
                                          const FrozenExtractor<T>*,           \
                                          const LossWeights&, Rng&);           \
  template LossValues loss_values<T>(const Graph<T>&, const LossBreakdown<T>&); \
  template std::pair<Graph<T>::Id, Graph<T>::Id> crop_valid<T>(                \
      Graph<T>&, Graph<T>::Id, Graph<T>::Id, const GridFit&);

VITAE_INSTANTIATE_LOSSES(float)
VITAE_INSTANTIATE_LOSSES(double)

}  // namespace vitae
