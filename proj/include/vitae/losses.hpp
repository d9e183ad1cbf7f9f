#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/backbone.hpp"
#include "vitae/graph.hpp"
#include "vitae/naflex.hpp"
#include "vitae/params.hpp"
#include "vitae/rng.hpp"

namespace vitae {

struct LossWeights {
  double w_char = 1.0;
  double w_ssim = 0.1;
  double w_perc = 500.0;
  int64_t tile = 64;
  int tiles_per_image = 1;
};

// Named ablation presets: "pixel", "pixel+ssim", "pixel+ssim+perc500",
// "pixel+ssim+perc1000". Unknown names throw.
LossWeights loss_preset(const std::string& name);
std::vector<std::string> loss_preset_names();

// A small vision transformer with fixed random weights. Features are tapped
// at blocks depth/3, 2*depth/3 and depth; the weights never receive
// gradients, so it acts as a frozen measuring stick for feature-space
// distance. load() swaps in externally trained weights of the same shape.
template <typename T>
class FrozenExtractor {
 public:
  explicit FrozenExtractor(int64_t patch = 8, int64_t width = 64,
                           int64_t depth = 4, int heads = 2,
                           uint64_t seed = 1001);

  // tile must be [S, S, 3] with S divisible by patch. Returns one
  // [tokens, width] feature node per tap block.
  std::vector<typename Graph<T>::Id> features(Graph<T>& g,
                                              typename Graph<T>::Id tile) const;

  void load(const ParamStore<T>& external);

  const ParamStore<T>& params() const { return ps_; }
  int64_t patch() const { return patch_; }
  int64_t width() const { return cfg_.width; }
  int64_t depth() const { return depth_; }
  const std::vector<int64_t>& tap_blocks() const { return taps_; }

 private:
  ParamStore<T> ps_;
  BlockConfig cfg_;
  int64_t patch_;
  int64_t depth_;
  std::vector<int64_t> taps_;
};

// The loss terms take the valid (content) region only: callers crop the
// padded canvas first, so padding cannot contribute to any term. x carries no
// gradient; xhat usually does.

// Mean over pixels of sqrt((x - xhat)^2 + eps^2), eps = 1e-3. Smooth at zero
// difference, where it evaluates to exactly eps.
template <typename T>
typename Graph<T>::Id charbonnier_loss(Graph<T>& g, typename Graph<T>::Id x,
                                       typename Graph<T>::Id xhat);

// 1 - mean local SSIM over 11x11 Gaussian windows (sigma 1.5) that lie fully
// inside the region, with the standard constants C1 = 0.01^2, C2 = 0.03^2 on
// unit dynamic range. Region must be at least 11 pixels on each side.
template <typename T>
typename Graph<T>::Id ssim_loss(Graph<T>& g, typename Graph<T>::Id x,
                                typename Graph<T>::Id xhat);

// Samples weights.tiles_per_image aligned square tiles uniformly inside the
// region, runs both sides through the extractor, L2-normalizes each token's
// feature vector and averages the MSE between the maps over taps and tiles.
// Regions smaller than the tile are first upscaled (aspect preserved,
// identically on both sides) until the tile fits.
template <typename T>
typename Graph<T>::Id perceptual_tile_loss(Graph<T>& g, typename Graph<T>::Id x,
                                           typename Graph<T>::Id xhat,
                                           const FrozenExtractor<T>& extractor,
                                           const LossWeights& weights, Rng& rng);

template <typename T>
struct LossBreakdown {
  typename Graph<T>::Id total = -1;
  typename Graph<T>::Id charb = -1;  // unweighted terms; npos when disabled
  typename Graph<T>::Id ssim = -1;
  typename Graph<T>::Id perc = -1;
  typename Graph<T>::Id reg = -1;
};

struct LossValues {
  double total = 0, charb = 0, ssim = 0, perc = 0, reg = 0;
};

// w_char*charb + w_ssim*ssim + w_perc*perc + reg. Terms with zero weight are
// skipped entirely; every built term is checked and a non-finite value throws
// with the term's name. extractor may be null when w_perc is 0.
template <typename T>
LossBreakdown<T> total_loss(Graph<T>& g, typename Graph<T>::Id x,
                            typename Graph<T>::Id xhat,
                            typename Graph<T>::Id reg_loss,
                            const FrozenExtractor<T>* extractor,
                            const LossWeights& weights, Rng& rng);

template <typename T>
LossValues loss_values(const Graph<T>& g, const LossBreakdown<T>& b);

// Both canvases cropped to the fit's content rectangle. Throws if the fit has
// no valid pixels.
template <typename T>
std::pair<typename Graph<T>::Id, typename Graph<T>::Id> crop_valid(
    Graph<T>& g, typename Graph<T>::Id x_canvas, typename Graph<T>::Id xhat_canvas,
    const GridFit& fit);

}  // namespace vitae
