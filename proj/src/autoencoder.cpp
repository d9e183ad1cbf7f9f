#include "vitae/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vitae {

namespace {

struct ScaleRow {
  int64_t width;
  int64_t dec_depth;
  int heads;
};

ScaleRow scale_row(const std::string& scale) {
  if (scale == "B") return {768, 12, 12};
  if (scale == "L") return {1024, 24, 16};
  if (scale == "G") return {1408, 40, 16};
  if (scale == "T") return {3072, 40, 24};
  throw std::invalid_argument("unknown model scale: " + scale);
}

int64_t head_channels(const ModelConfig& cfg) {
  return cfg.reg == Regularizer::kl ? 2 * cfg.latent_channels : cfg.latent_channels;
}

int64_t patch_pixels(const ModelConfig& cfg) { return 3 * cfg.patch * cfg.patch; }

}  // namespace

Regularizer parse_regularizer(const std::string& name) {
  if (name == "kl") return Regularizer::kl;
  if (name == "tanh_noise") return Regularizer::tanh_noise;
  if (name == "layernorm") return Regularizer::layernorm;
  throw std::invalid_argument("unknown regularizer: " + name);
}

std::string regularizer_name(Regularizer reg) {
  switch (reg) {
    case Regularizer::kl: return "kl";
    case Regularizer::tanh_noise: return "tanh_noise";
    case Regularizer::layernorm: return "layernorm";
  }
  throw std::logic_error("bad regularizer enum");
}

ModelConfig make_config(const std::string& scale, int64_t enc_depth, int64_t patch,
                        int64_t latent_channels, Regularizer reg) {
  ScaleRow row = scale_row(scale);
  ModelConfig cfg;
  cfg.enc_depth = enc_depth;
  cfg.dec_depth = row.dec_depth;
  cfg.width = row.width;
  cfg.heads = row.heads;
  cfg.patch = patch;
  cfg.latent_channels = latent_channels;
  cfg.reg = reg;
  cfg.reg_param = 0.01;
  std::string enc_part =
      enc_depth == 0 ? "Linear" : scale + "d" + std::to_string(enc_depth);
  cfg.name = enc_part + "-" + scale + "/" + std::to_string(patch) + "x" +
             std::to_string(latent_channels);
  validate_config(cfg);
  return cfg;
}

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.enc_depth = 2;
  cfg.dec_depth = 6;
  cfg.width = 128;
  cfg.heads = 4;
  cfg.patch = 8;
  cfg.latent_channels = 16;
  cfg.reg = Regularizer::layernorm;
  cfg.reg_param = 0.01;
  cfg.name = "desk";
  return cfg;
}

double compression_ratio(int64_t patch, int64_t latent_channels) {
  if (latent_channels < 1) throw std::invalid_argument("latent_channels must be >= 1");
  return 3.0 * static_cast<double>(patch * patch) /
         static_cast<double>(latent_channels);
}

std::vector<std::string> validate_config(const ModelConfig& cfg) {
  if (cfg.width <= 0) throw std::invalid_argument("width must be positive");
  if (cfg.patch <= 0) throw std::invalid_argument("patch must be positive");
  if (cfg.latent_channels < 1)
    throw std::invalid_argument("latent_channels must be >= 1");
  if (cfg.enc_depth < 0) throw std::invalid_argument("enc_depth must be >= 0");
  if (cfg.dec_depth < 1) throw std::invalid_argument("dec_depth must be >= 1");
  if (cfg.heads < 1) throw std::invalid_argument("heads must be >= 1");
  if (cfg.width % cfg.heads != 0)
    throw std::invalid_argument("width must be divisible by heads");
  if ((cfg.width / cfg.heads) % 4 != 0)
    throw std::invalid_argument("head dim must be divisible by 4 for axial rotary");
  if (cfg.reg_param < 0) throw std::invalid_argument("reg_param must be >= 0");

  std::vector<std::string> warnings;
  int64_t px = patch_pixels(cfg);
  if (cfg.width < px) {
    warnings.push_back("width " + std::to_string(cfg.width) +
                       " is below the " + std::to_string(px) +
                       " pixels per token; the patch embedding is lossy");
  }
  return warnings;
}

ParamCounts count_parameters(const ModelConfig& cfg) {
  BlockConfig bc = cfg.block();
  int64_t block = block_param_count(bc);
  int64_t px = patch_pixels(cfg);
  int64_t hc = head_channels(cfg);
  int64_t w = cfg.width;
  int64_t c = cfg.latent_channels;

  ParamCounts counts;
  if (cfg.enc_depth == 0) {
    counts.encoder = hc * px + hc;
  } else {
    counts.encoder = (w * px + w)              // patch embedding
                     + cfg.enc_depth * block   // transformer blocks
                     + 2 * w                   // output layernorm
                     + (hc * w + hc);          // latent head
  }
  counts.decoder = (w * c + w)                 // latent up-projection
                   + cfg.dec_depth * block     // transformer blocks
                   + 2 * w                     // output layernorm
                   + (px * w + px);            // patch head
  counts.total = counts.encoder + counts.decoder;
  return counts;
}

template <typename T>
void init_params(ParamStore<T>& ps, const ModelConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  Rng rng = derive_rng(seed, {0xAEull});
  BlockConfig bc = cfg.block();
  int64_t px = patch_pixels(cfg);
  int64_t hc = head_channels(cfg);
  int64_t w = cfg.width;
  int64_t c = cfg.latent_channels;
  const double sd = 0.02;

  if (cfg.enc_depth == 0) {
    ps.add("enc.head.w", normal_init<T>({hc, px}, rng, sd));
    ps.add("enc.head.b", const_init<T>({hc}, 0.0));
  } else {
    ps.add("enc.embed.w", normal_init<T>({w, px}, rng, sd));
    ps.add("enc.embed.b", const_init<T>({w}, 0.0));
    for (int64_t i = 0; i < cfg.enc_depth; ++i)
      add_block_params(ps, "enc.block" + std::to_string(i) + ".", bc, rng);
    ps.add("enc.out_ln.g", const_init<T>({w}, 1.0));
    ps.add("enc.out_ln.b", const_init<T>({w}, 0.0));
    ps.add("enc.head.w", normal_init<T>({hc, w}, rng, sd));
    ps.add("enc.head.b", const_init<T>({hc}, 0.0));
  }

  ps.add("dec.embed.w", normal_init<T>({w, c}, rng, sd));
  ps.add("dec.embed.b", const_init<T>({w}, 0.0));
  for (int64_t i = 0; i < cfg.dec_depth; ++i)
    add_block_params(ps, "dec.block" + std::to_string(i) + ".", bc, rng);
  ps.add("dec.out_ln.g", const_init<T>({w}, 1.0));
  ps.add("dec.out_ln.b", const_init<T>({w}, 0.0));
  ps.add("dec.head.w", normal_init<T>({px, w}, rng, sd));
  ps.add("dec.head.b", const_init<T>({px}, 0.0));
}

template <typename T>
typename Graph<T>::Id encode(Graph<T>& g, typename Graph<T>::Id tokens,
                             const Bound<T>& p, const ModelConfig& cfg,
                             const AttnContext<T>& ctx) {
  if (cfg.enc_depth == 0)
    return g.linear(tokens, p["enc.head.w"], p["enc.head.b"]);

  BlockConfig bc = cfg.block();
  auto x = g.linear(tokens, p["enc.embed.w"], p["enc.embed.b"]);
  for (int64_t i = 0; i < cfg.enc_depth; ++i)
    x = block_forward(g, x, p, "enc.block" + std::to_string(i) + ".", bc, ctx);
  x = g.layernorm(x, p["enc.out_ln.g"], p["enc.out_ln.b"], static_cast<T>(cfg.eps));
  return g.linear(x, p["enc.head.w"], p["enc.head.b"]);
}

template <typename T>
RegResult<T> regularize_latent(Graph<T>& g, typename Graph<T>::Id head,
                               const ModelConfig& cfg, bool training, Rng& rng) {
  using Id = typename Graph<T>::Id;
  RegResult<T> r;
  const int64_t c = cfg.latent_channels;

  switch (cfg.reg) {
    case Regularizer::kl: {
      if (g.value(head).cols() != 2 * c)
        throw std::invalid_argument("kl regularizer expects a 2c-channel head");
      Id mu = g.slice_cols(head, 0, c);
      Id logvar = g.slice_cols(head, c, 2 * c);
      if (training) {
        Tensor<T> noise(g.value(mu).shape);
        for (int64_t i = 0; i < noise.numel(); ++i)
          noise[i] = static_cast<T>(rng.normal());
        Id sigma = g.exp(g.scale(logvar, static_cast<T>(0.5)));
        r.z = g.add(mu, g.mul(sigma, g.leaf(std::move(noise))));
      } else {
        r.z = mu;
      }
      // mean over dims of 0.5*(mu^2 + sigma^2 - 1 - log sigma^2), times beta
      Id t = g.sub(g.add(g.square(mu), g.exp(logvar)),
                   g.add_const(logvar, static_cast<T>(1)));
      r.reg_loss = g.scale(g.mean_all(t), static_cast<T>(0.5 * cfg.reg_param));
      break;
    }
    case Regularizer::tanh_noise: {
      if (g.value(head).cols() != c)
        throw std::invalid_argument("tanh_noise regularizer expects a c-channel head");
      Id t = g.tanh(head);
      if (training && cfg.reg_param > 0) {
        Tensor<T> noise(g.value(t).shape);
        for (int64_t i = 0; i < noise.numel(); ++i)
          noise[i] = static_cast<T>(rng.normal() * cfg.reg_param);
        t = g.add(t, g.leaf(std::move(noise)));
      }
      r.z = t;
      break;
    }
    case Regularizer::layernorm: {
      if (g.value(head).cols() != c)
        throw std::invalid_argument("layernorm regularizer expects a c-channel head");
      r.z = g.layernorm(head, Graph<T>::npos, Graph<T>::npos,
                        static_cast<T>(cfg.eps));
      break;
    }
  }
  return r;
}

template <typename T>
typename Graph<T>::Id decode(Graph<T>& g, typename Graph<T>::Id z,
                             const Bound<T>& p, const ModelConfig& cfg,
                             const AttnContext<T>& ctx) {
  if (g.value(z).cols() != cfg.latent_channels)
    throw std::invalid_argument("latent channel mismatch in decode");
  BlockConfig bc = cfg.block();
  auto x = g.linear(z, p["dec.embed.w"], p["dec.embed.b"]);
  for (int64_t i = 0; i < cfg.dec_depth; ++i)
    x = block_forward(g, x, p, "dec.block" + std::to_string(i) + ".", bc, ctx);
  x = g.layernorm(x, p["dec.out_ln.g"], p["dec.out_ln.b"], static_cast<T>(cfg.eps));
  x = g.linear(x, p["dec.head.w"], p["dec.head.b"]);
  return g.gather(x, unpatchify_plan<T>(ctx.grid_h, ctx.grid_w, cfg.patch));
}

template <typename T>
Tensor<T> encode_latent(const PackedImage& packed, const ParamStore<T>& ps,
                        const ModelConfig& cfg) {
  Graph<T> g(false);
  Bound<T> b = bind(g, ps, false);
  auto ctx = make_attn_context<T>(cfg.block(), packed.grid.grid_h,
                                  packed.grid.grid_w, -1, false);
  auto tokens = g.leaf(packed.tokens.template cast<T>());
  auto head = encode(g, tokens, b, cfg, ctx);
  Rng rng(0);
  auto reg = regularize_latent(g, head, cfg, false, rng);
  return g.value(reg.z);
}

template <typename T>
Image reconstruct_image(const Image& img, const ParamStore<T>& ps,
                        const ModelConfig& cfg, int64_t budget,
                        int64_t window_radius) {
  PackedImage packed = pack_image(img, cfg.patch, budget);
  const GridFit& fit = packed.grid;

  Graph<T> g(false);
  Bound<T> b = bind(g, ps, false);
  BlockConfig bc = cfg.block();
  auto enc_ctx = make_attn_context<T>(bc, fit.grid_h, fit.grid_w, -1, false);
  auto dec_ctx =
      make_attn_context<T>(bc, fit.grid_h, fit.grid_w, window_radius, false);

  auto tokens = g.leaf(packed.tokens.template cast<T>());
  auto head = encode(g, tokens, b, cfg, enc_ctx);
  Rng rng(0);
  auto reg = regularize_latent(g, head, cfg, false, rng);
  auto canvas = decode(g, reg.z, b, cfg, dec_ctx);

  const Tensor<T>& cv = g.value(canvas);
  Image out;
  out.height = fit.resized_h;
  out.width = fit.resized_w;
  out.pixels.resize(static_cast<size_t>(out.height * out.width * 3));
  for (int64_t y = 0; y < out.height; ++y)
    for (int64_t x = 0; x < out.width; ++x)
      for (int64_t ch = 0; ch < 3; ++ch) {
        double v = static_cast<double>(cv.at(y, x, ch));
        out.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

#define VITAE_INSTANTIATE_AUTOENCODER(T)                                       \
  template void init_params<T>(ParamStore<T>&, const ModelConfig&, uint64_t); \
  template Graph<T>::Id encode<T>(Graph<T>&, Graph<T>::Id, const Bound<T>&,   \
                                  const ModelConfig&, const AttnContext<T>&); \
  template RegResult<T> regularize_latent<T>(Graph<T>&, Graph<T>::Id,         \
                                             const ModelConfig&, bool, Rng&); \
  template Graph<T>::Id decode<T>(Graph<T>&, Graph<T>::Id, const Bound<T>&,   \
                                  const ModelConfig&, const AttnContext<T>&); \
  template Tensor<T> encode_latent<T>(const PackedImage&, const ParamStore<T>&, \
                                      const ModelConfig&);                     \
  template Image reconstruct_image<T>(const Image&, const ParamStore<T>&,      \
                                      const ModelConfig&, int64_t, int64_t);

VITAE_INSTANTIATE_AUTOENCODER(float)
VITAE_INSTANTIATE_AUTOENCODER(double)

}  // namespace vitae
