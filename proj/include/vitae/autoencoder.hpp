#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/backbone.hpp"
#include "vitae/graph.hpp"
#include "vitae/naflex.hpp"
#include "vitae/params.hpp"

namespace vitae {

enum class Regularizer { kl, tanh_noise, layernorm };

Regularizer parse_regularizer(const std::string& name);
std::string regularizer_name(Regularizer reg);

struct ModelConfig {
  int64_t enc_depth = 2;  // 0 = single affine projection encoder
  int64_t dec_depth = 6;
  int64_t width = 128;
  int heads = 4;
  int64_t patch = 8;
  int64_t latent_channels = 16;
  Regularizer reg = Regularizer::layernorm;
  double reg_param = 0.01;  // beta for kl, sigma for tanh_noise
  std::string name = "desk";
  double mlp_expansion = 8.0 / 3.0;
  double layerscale_init = 1e-4;
  double rope_base = 10000.0;
  double eps = 1e-6;

  BlockConfig block() const {
    BlockConfig b;
    b.width = width;
    b.heads = heads;
    b.mlp_expansion = mlp_expansion;
    b.layerscale_init = layerscale_init;
    b.rope_base = rope_base;
    b.eps = eps;
    return b;
  }
};

// Named scale table (width, dec_depth, heads): B (768,12,12), L (1024,24,16),
// G (1408,40,16), T (3072,40,24). Names follow the "<enc>d<depth>-<dec>/<p>x<c>"
// scheme, with enc_depth 0 rendered as "Linear".
ModelConfig make_config(const std::string& scale, int64_t enc_depth, int64_t patch,
                        int64_t latent_channels, Regularizer reg);

// Small model that trains in minutes on a CPU core; not one of the named
// scales.
ModelConfig desk_config();

// Pixels per latent dimension: 3*p^2 / c.
double compression_ratio(int64_t patch, int64_t latent_channels);

// Hard invariant violations throw; soft issues (encoder narrower than a
// patch's pixel count) come back as warning strings.
std::vector<std::string> validate_config(const ModelConfig& cfg);

struct ParamCounts {
  int64_t encoder = 0;
  int64_t decoder = 0;
  int64_t total = 0;
};

// Closed-form count matching init_params exactly; never allocates, so the
// multi-billion-parameter configs can be tallied.
ParamCounts count_parameters(const ModelConfig& cfg);

template <typename T>
void init_params(ParamStore<T>& ps, const ModelConfig& cfg, uint64_t seed);

// Token embedding, enc_depth full-attention blocks and the latent head.
// Returns [tokens, c], or [tokens, 2c] (mean and log variance) in kl mode.
template <typename T>
typename Graph<T>::Id encode(Graph<T>& g, typename Graph<T>::Id tokens,
                             const Bound<T>& p, const ModelConfig& cfg,
                             const AttnContext<T>& ctx);

template <typename T>
struct RegResult {
  typename Graph<T>::Id z = -1;
  typename Graph<T>::Id reg_loss = -1;  // npos when the mode adds no loss term
};

// kl: z = mu + sigma*eps while training, mu at inference; loss is
// beta * mean(0.5*(mu^2 + sigma^2 - 1 - log sigma^2)). tanh_noise: tanh plus
// scaled noise while training, plain tanh at inference. layernorm: per-token
// normalization, fully deterministic. rng is only drawn from in training mode.
template <typename T>
RegResult<T> regularize_latent(Graph<T>& g, typename Graph<T>::Id head,
                               const ModelConfig& cfg, bool training, Rng& rng);

// Latent up-projection, dec_depth blocks (windowed at inference when the
// context says so) and the patch head, unpatchified to the padded canvas
// [grid_h*p, grid_w*p, 3]. Raw values: clamping is a serialization concern.
template <typename T>
typename Graph<T>::Id decode(Graph<T>& g, typename Graph<T>::Id z,
                             const Bound<T>& p, const ModelConfig& cfg,
                             const AttnContext<T>& ctx);

// Inference conveniences operating on plain tensors (no tape).
template <typename T>
Tensor<T> encode_latent(const PackedImage& packed, const ParamStore<T>& ps,
                        const ModelConfig& cfg);

// Full round trip at a token budget; returns the reconstructed valid region
// (resized dims of the fit), clamped to [0,1]. window_radius < 0 disables the
// sliding window.
template <typename T>
Image reconstruct_image(const Image& img, const ParamStore<T>& ps,
                        const ModelConfig& cfg, int64_t budget,
                        int64_t window_radius);

}  // namespace vitae
