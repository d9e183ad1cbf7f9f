#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "vitae/graph.hpp"
#include "vitae/params.hpp"

namespace vitae {

// Shape of one transformer block. Pre-norm residual layout with per-head
// RMSNorm on Q/K, axial rotary positions, SwiGLU MLP and LayerScale on both
// branches.
struct BlockConfig {
  int64_t width = 0;
  int heads = 1;
  double mlp_expansion = 8.0 / 3.0;
  double layerscale_init = 1e-4;
  double rope_base = 10000.0;
  double eps = 1e-6;
};

// Hidden width of the SwiGLU MLP: width*expansion rounded to the nearest
// multiple of 64, at least 64.
int64_t mlp_hidden(int64_t width, double expansion);

// Scalar count of one block's parameters, closed form. Must agree with what
// add_block_params creates; large configs are counted without allocation.
int64_t block_param_count(const BlockConfig& cfg);

template <typename T>
void add_block_params(ParamStore<T>& ps, const std::string& prefix,
                      const BlockConfig& cfg, Rng& rng);

// Rotary tables for a row-major token grid. head_dim must be divisible by 4:
// the first head_dim/4 pairs rotate by the token's grid row, the remaining
// pairs by its column, at frequencies rope_base^(-2i / (head_dim/2)).
template <typename T>
std::shared_ptr<RopeTables<T>> make_rope_tables(int64_t grid_h, int64_t grid_w,
                                                int64_t head_dim, double rope_base);

// Additive attention bias over a token grid: 0 where a query may see a key,
// -1e30 otherwise. radius < 0 means no window (mask only invalid tokens).
// valid may be null (all tokens valid). The diagonal is always open so no row
// is fully masked.
template <typename T>
std::shared_ptr<Tensor<T>> attention_bias(int64_t grid_h, int64_t grid_w,
                                          int64_t radius,
                                          const std::vector<uint8_t>* valid);

// Sliding-window attention computed by streaming over each query's
// (2r+1)^2 neighborhood: no L x L score matrix is ever built, so cost and
// memory scale linearly in token count. Inference only (values, no tape).
template <typename T>
Tensor<T> windowed_attention(const Tensor<T>& q, const Tensor<T>& k,
                             const Tensor<T>& v, int heads, int64_t grid_h,
                             int64_t grid_w, int64_t radius);

// Everything attention needs about the token geometry of one sequence.
// Build once per stack via make_attn_context and share across blocks.
template <typename T>
struct AttnContext {
  std::shared_ptr<const RopeTables<T>> rope;
  std::shared_ptr<const Tensor<T>> bias;  // null = nothing to mask densely
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  int64_t window_radius = -1;  // >= 0 enables the windowed path
  const std::vector<uint8_t>* valid = nullptr;
};

// Chooses dense masking (needed whenever gradients flow or some token is
// invalid) versus the streaming window path (inference with all tokens valid).
template <typename T>
AttnContext<T> make_attn_context(const BlockConfig& cfg, int64_t grid_h,
                                 int64_t grid_w, int64_t window_radius,
                                 bool grad_enabled,
                                 const std::vector<uint8_t>* valid = nullptr);

// QKV projection, per-head RMSNorm on Q and K, rotary positions, attention,
// output projection. x is [tokens, width].
template <typename T>
typename Graph<T>::Id attention_layer(Graph<T>& g, typename Graph<T>::Id x,
                                      const Bound<T>& p, const std::string& prefix,
                                      const BlockConfig& cfg,
                                      const AttnContext<T>& ctx);

// out = W_down(silu(W_gate x) * (W_up x))
template <typename T>
typename Graph<T>::Id swiglu_mlp(Graph<T>& g, typename Graph<T>::Id x,
                                 const Bound<T>& p, const std::string& prefix,
                                 const BlockConfig& cfg);

// x + LayerScale*Attn(LN(x)), then + LayerScale*MLP(LN(x)). Invalid tokens
// pass through unchanged.
template <typename T>
typename Graph<T>::Id block_forward(Graph<T>& g, typename Graph<T>::Id x,
                                    const Bound<T>& p, const std::string& prefix,
                                    const BlockConfig& cfg,
                                    const AttnContext<T>& ctx);

// Number of keys token (row, col) may attend to under a Chebyshev window.
int64_t window_keys_at(int64_t grid_h, int64_t grid_w, int64_t radius,
                       int64_t row, int64_t col);
// Total query-key pairs over the grid; radius < 0 gives the full L*L count.
int64_t attention_pair_count(int64_t grid_h, int64_t grid_w, int64_t radius);

}  // namespace vitae
