#include "vitae/backbone.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>

namespace vitae {

int64_t mlp_hidden(int64_t width, double expansion) {
  int64_t h = 64 * static_cast<int64_t>(std::llround(
                       static_cast<double>(width) * expansion / 64.0));
  return std::max<int64_t>(64, h);
}

int64_t block_param_count(const BlockConfig& cfg) {
  int64_t w = cfg.width;
  int64_t h = mlp_hidden(w, cfg.mlp_expansion);
  int64_t attn = 3 * w * w + 3 * w  // qkv
                 + 2 * w            // q/k gains
                 + w * w + w;       // output projection
  int64_t mlp = 3 * w * h + 2 * h + w;
  int64_t norms = 4 * w;  // two layernorms
  int64_t scales = 2 * w;
  return attn + mlp + norms + scales;
}

template <typename T>
void add_block_params(ParamStore<T>& ps, const std::string& prefix,
                      const BlockConfig& cfg, Rng& rng) {
  int64_t w = cfg.width;
  int64_t h = mlp_hidden(w, cfg.mlp_expansion);
  ps.add(prefix + "ln1.g", const_init<T>({w}, 1.0));
  ps.add(prefix + "ln1.b", const_init<T>({w}, 0.0));
  ps.add(prefix + "attn.wqkv", normal_init<T>({3 * w, w}, rng, 0.02));
  ps.add(prefix + "attn.bqkv", const_init<T>({3 * w}, 0.0));
  ps.add(prefix + "attn.qgain", const_init<T>({w}, 1.0));
  ps.add(prefix + "attn.kgain", const_init<T>({w}, 1.0));
  ps.add(prefix + "attn.wo", normal_init<T>({w, w}, rng, 0.02));
  ps.add(prefix + "attn.bo", const_init<T>({w}, 0.0));
  ps.add(prefix + "ls1", const_init<T>({w}, cfg.layerscale_init));
  ps.add(prefix + "ln2.g", const_init<T>({w}, 1.0));
  ps.add(prefix + "ln2.b", const_init<T>({w}, 0.0));
  ps.add(prefix + "mlp.wgate", normal_init<T>({h, w}, rng, 0.02));
  ps.add(prefix + "mlp.bgate", const_init<T>({h}, 0.0));
  ps.add(prefix + "mlp.wup", normal_init<T>({h, w}, rng, 0.02));
  ps.add(prefix + "mlp.bup", const_init<T>({h}, 0.0));
  ps.add(prefix + "mlp.wdown", normal_init<T>({w, h}, rng, 0.02));
  ps.add(prefix + "mlp.bdown", const_init<T>({w}, 0.0));
  ps.add(prefix + "ls2", const_init<T>({w}, cfg.layerscale_init));
}

template <typename T>
std::shared_ptr<RopeTables<T>> make_rope_tables(int64_t grid_h, int64_t grid_w,
                                                int64_t head_dim, double rope_base) {
  if (head_dim % 4 != 0)
    throw std::runtime_error("rope needs head_dim divisible by 4");
  int64_t pairs = head_dim / 2;
  int64_t quarter = pairs / 2;  // pairs per axis
  int64_t l = grid_h * grid_w;
  auto t = std::make_shared<RopeTables<T>>();
  t->cos = Tensor<T>({l, pairs});
  t->sin = Tensor<T>({l, pairs});
  std::vector<double> freq(static_cast<size_t>(quarter));
  double d_half = static_cast<double>(head_dim) / 2.0;
  for (int64_t i = 0; i < quarter; ++i)
    freq[static_cast<size_t>(i)] = std::pow(rope_base, -2.0 * static_cast<double>(i) / d_half);
  for (int64_t tok = 0; tok < l; ++tok) {
    double row = static_cast<double>(tok / grid_w);
    double col = static_cast<double>(tok % grid_w);
    for (int64_t j = 0; j < pairs; ++j) {
      double coord = j < quarter ? row : col;
      double angle = coord * freq[static_cast<size_t>(j % quarter)];
      t->cos[tok * pairs + j] = static_cast<T>(std::cos(angle));
      t->sin[tok * pairs + j] = static_cast<T>(std::sin(angle));
    }
  }
  return t;
}

template <typename T>
std::shared_ptr<Tensor<T>> attention_bias(int64_t grid_h, int64_t grid_w,
                                          int64_t radius,
                                          const std::vector<uint8_t>* valid) {
  int64_t l = grid_h * grid_w;
  auto bias = std::make_shared<Tensor<T>>(std::vector<int64_t>{l, l});
  const T blocked = T(-1e30);
  for (int64_t i = 0; i < l; ++i) {
    int64_t ri = i / grid_w, ci = i % grid_w;
    for (int64_t j = 0; j < l; ++j) {
      if (i == j) continue;
      bool ok = !valid || (*valid)[static_cast<size_t>(j)];
      if (ok && radius >= 0) {
        int64_t rj = j / grid_w, cj = j % grid_w;
        ok = std::abs(ri - rj) <= radius && std::abs(ci - cj) <= radius;
      }
      if (!ok) bias->at(i, j) = blocked;
    }
  }
  return bias;
}

template <typename T>
Tensor<T> windowed_attention(const Tensor<T>& q, const Tensor<T>& k,
                             const Tensor<T>& v, int heads, int64_t grid_h,
                             int64_t grid_w, int64_t radius) {
  int64_t l = q.rows(), d = q.cols(), hd = d / heads;
  assert(l == grid_h * grid_w && k.rows() == l && v.rows() == l);
  assert(radius >= 0);
  T sc = T(1) / std::sqrt(static_cast<T>(hd));
  Tensor<T> y({l, d});
  int64_t side = 2 * radius + 1;
  std::vector<T> scores(static_cast<size_t>(side * side));
  for (int64_t t = 0; t < l; ++t) {
    int64_t r0 = t / grid_w, c0 = t % grid_w;
    int64_t rlo = std::max<int64_t>(0, r0 - radius);
    int64_t rhi = std::min(grid_h - 1, r0 + radius);
    int64_t clo = std::max<int64_t>(0, c0 - radius);
    int64_t chi = std::min(grid_w - 1, c0 + radius);
    for (int h = 0; h < heads; ++h) {
      const T* qrow = q.ptr() + t * d + h * hd;
      size_t count = 0;
      T mx = T(-1e30);
      for (int64_t rr = rlo; rr <= rhi; ++rr) {
        for (int64_t cc = clo; cc <= chi; ++cc) {
          const T* krow = k.ptr() + (rr * grid_w + cc) * d + h * hd;
          T dot = T(0);
          for (int64_t e = 0; e < hd; ++e) dot += qrow[e] * krow[e];
          dot *= sc;
          scores[count++] = dot;
          mx = std::max(mx, dot);
        }
      }
      T denom = T(0);
      for (size_t s = 0; s < count; ++s) {
        scores[s] = std::exp(scores[s] - mx);
        denom += scores[s];
      }
      T* yrow = y.ptr() + t * d + h * hd;
      size_t idx = 0;
      for (int64_t rr = rlo; rr <= rhi; ++rr) {
        for (int64_t cc = clo; cc <= chi; ++cc) {
          T wgt = scores[idx++] / denom;
          const T* vrow = v.ptr() + (rr * grid_w + cc) * d + h * hd;
          for (int64_t e = 0; e < hd; ++e) yrow[e] += wgt * vrow[e];
        }
      }
    }
  }
  return y;
}

template <typename T>
AttnContext<T> make_attn_context(const BlockConfig& cfg, int64_t grid_h,
                                 int64_t grid_w, int64_t window_radius,
                                 bool grad_enabled,
                                 const std::vector<uint8_t>* valid) {
  if (cfg.width % cfg.heads != 0)
    throw std::runtime_error("width not divisible by heads");
  AttnContext<T> ctx;
  ctx.grid_h = grid_h;
  ctx.grid_w = grid_w;
  ctx.window_radius = window_radius;
  ctx.valid = valid;
  ctx.rope = make_rope_tables<T>(grid_h, grid_w, cfg.width / cfg.heads, cfg.rope_base);
  bool any_invalid = false;
  if (valid)
    for (uint8_t m : *valid) any_invalid |= (m == 0);
  if ((window_radius >= 0 && grad_enabled) || any_invalid)
    ctx.bias = attention_bias<T>(grid_h, grid_w, window_radius, valid);
  return ctx;
}

template <typename T>
typename Graph<T>::Id attention_layer(Graph<T>& g, typename Graph<T>::Id x,
                                      const Bound<T>& p, const std::string& prefix,
                                      const BlockConfig& cfg,
                                      const AttnContext<T>& ctx) {
  using Id = typename Graph<T>::Id;
  int64_t w = cfg.width;
  T eps = static_cast<T>(cfg.eps);
  Id qkv = g.linear(x, p[prefix + "attn.wqkv"], p[prefix + "attn.bqkv"]);
  Id q = g.slice_cols(qkv, 0, w);
  Id k = g.slice_cols(qkv, w, 2 * w);
  Id v = g.slice_cols(qkv, 2 * w, 3 * w);
  q = g.rmsnorm_heads(q, p[prefix + "attn.qgain"], cfg.heads, eps);
  k = g.rmsnorm_heads(k, p[prefix + "attn.kgain"], cfg.heads, eps);
  q = g.rope(q, ctx.rope, cfg.heads);
  k = g.rope(k, ctx.rope, cfg.heads);
  Id y;
  if (ctx.bias) {
    y = g.attention(q, k, v, cfg.heads, ctx.bias);
  } else if (ctx.window_radius >= 0) {
    // dense masking is forced whenever gradients are live, so reaching the
    // streaming path with a tape active would be a wiring bug
    assert(!g.grad_enabled());
    y = g.leaf(windowed_attention(g.value(q), g.value(k), g.value(v), cfg.heads,
                                  ctx.grid_h, ctx.grid_w, ctx.window_radius));
  } else {
    y = g.attention(q, k, v, cfg.heads);
  }
  return g.linear(y, p[prefix + "attn.wo"], p[prefix + "attn.bo"]);
}

template <typename T>
typename Graph<T>::Id swiglu_mlp(Graph<T>& g, typename Graph<T>::Id x,
                                 const Bound<T>& p, const std::string& prefix,
                                 const BlockConfig& cfg) {
  using Id = typename Graph<T>::Id;
  Id gate = g.silu(g.linear(x, p[prefix + "mlp.wgate"], p[prefix + "mlp.bgate"]));
  Id up = g.linear(x, p[prefix + "mlp.wup"], p[prefix + "mlp.bup"]);
  return g.linear(g.mul(gate, up), p[prefix + "mlp.wdown"], p[prefix + "mlp.bdown"]);
}

namespace {

template <typename T>
typename Graph<T>::Id mask_branch(Graph<T>& g, typename Graph<T>::Id branch,
                                  const std::vector<uint8_t>* valid) {
  if (!valid) return branch;
  bool any_invalid = false;
  for (uint8_t m : *valid) any_invalid |= (m == 0);
  if (!any_invalid) return branch;
  Tensor<T> m({static_cast<int64_t>(valid->size())});
  for (size_t i = 0; i < valid->size(); ++i) m[static_cast<int64_t>(i)] = (*valid)[i] ? T(1) : T(0);
  return g.mul_colvec(branch, g.leaf(std::move(m)));
}

}  // namespace

template <typename T>
typename Graph<T>::Id block_forward(Graph<T>& g, typename Graph<T>::Id x,
                                    const Bound<T>& p, const std::string& prefix,
                                    const BlockConfig& cfg,
                                    const AttnContext<T>& ctx) {
  using Id = typename Graph<T>::Id;
  T eps = static_cast<T>(cfg.eps);
  Id n1 = g.layernorm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"], eps);
  Id a = attention_layer(g, n1, p, prefix, cfg, ctx);
  a = g.mul_rowvec(a, p[prefix + "ls1"]);
  a = mask_branch(g, a, ctx.valid);
  x = g.add(x, a);
  Id n2 = g.layernorm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"], eps);
  Id m = swiglu_mlp(g, n2, p, prefix, cfg);
  m = g.mul_rowvec(m, p[prefix + "ls2"]);
  m = mask_branch(g, m, ctx.valid);
  return g.add(x, m);
}

int64_t window_keys_at(int64_t grid_h, int64_t grid_w, int64_t radius,
                       int64_t row, int64_t col) {
  int64_t rows = std::min(grid_h - 1, row + radius) - std::max<int64_t>(0, row - radius) + 1;
  int64_t cols = std::min(grid_w - 1, col + radius) - std::max<int64_t>(0, col - radius) + 1;
  return rows * cols;
}

int64_t attention_pair_count(int64_t grid_h, int64_t grid_w, int64_t radius) {
  int64_t l = grid_h * grid_w;
  if (radius < 0) return l * l;
  int64_t total = 0;
  for (int64_t r = 0; r < grid_h; ++r)
    for (int64_t c = 0; c < grid_w; ++c)
      total += window_keys_at(grid_h, grid_w, radius, r, c);
  return total;
}

#define VITAE_INSTANTIATE_BACKBONE(T)                                          \
  template void add_block_params<T>(ParamStore<T>&, const std::string&,        \
                                    const BlockConfig&, Rng&);                  \
  template std::shared_ptr<RopeTables<T>> make_rope_tables<T>(int64_t, int64_t, \
                                                              int64_t, double); \
  template std::shared_ptr<Tensor<T>> attention_bias<T>(                        \
      int64_t, int64_t, int64_t, const std::vector<uint8_t>*);                  \
  template Tensor<T> windowed_attention<T>(const Tensor<T>&, const Tensor<T>&,  \
                                           const Tensor<T>&, int, int64_t,      \
                                           int64_t, int64_t);                   \
  template AttnContext<T> make_attn_context<T>(const BlockConfig&, int64_t,     \
                                               int64_t, int64_t, bool,          \
                                               const std::vector<uint8_t>*);    \
  template Graph<T>::Id attention_layer<T>(Graph<T>&, Graph<T>::Id,             \
                                           const Bound<T>&, const std::string&, \
                                           const BlockConfig&,                  \
                                           const AttnContext<T>&);              \
  template Graph<T>::Id swiglu_mlp<T>(Graph<T>&, Graph<T>::Id, const Bound<T>&, \
                                      const std::string&, const BlockConfig&);  \
  template Graph<T>::Id block_forward<T>(Graph<T>&, Graph<T>::Id,               \
                                         const Bound<T>&, const std::string&,   \
                                         const BlockConfig&,                    \
                                         const AttnContext<T>&);

VITAE_INSTANTIATE_BACKBONE(float)
VITAE_INSTANTIATE_BACKBONE(double)

}  // namespace vitae
