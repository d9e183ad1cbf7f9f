#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

// Precomputed sparse linear map: out[m] = sum over e in [offset[m], offset[m+1])
// of weight[e] * in[index[e]]. One plan expresses crop, patchify, unpatchify
// and bilinear resize, so the graph needs a single gather op with an exact
// scatter-add backward.
template <typename T>
struct GatherPlan {
  std::vector<int64_t> out_shape;
  std::vector<int32_t> index;
  std::vector<T> weight;
  std::vector<int64_t> offset;  // numel(out_shape) + 1 entries
  int64_t in_numel = 0;
};

// Rotary tables for one token sequence: cos/sin of shape [L, head_dim/2].
// Entry (t, j) holds the angle for pair j of token t; the first head_dim/4
// pairs encode the token's grid row, the rest its column.
template <typename T>
struct RopeTables {
  Tensor<T> cos;
  Tensor<T> sin;
};

// Reverse-mode tape. Nodes are appended in creation order, which is a valid
// topological order, so backward() is a single reverse sweep. Construct with
// grad_enabled=false for inference: ops then skip closures and any state kept
// only for the backward pass.
template <typename T>
class Graph {
 public:
  using Id = int32_t;
  static constexpr Id npos = -1;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Id leaf(Tensor<T> value, bool requires_grad = false);

  // Elementwise; both operands must share a shape unless noted.
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id scale(Id a, T c);
  Id add_const(Id a, T c);
  Id silu(Id a);
  Id tanh(Id a);
  Id exp(Id a);
  Id square(Id a);

  // Shape and indexing.
  Id slice_cols(Id a, int64_t c0, int64_t c1);
  Id gather(Id a, std::shared_ptr<const GatherPlan<T>> plan);
  Id embed_row(Id table, int64_t row);

  // Linear algebra. linear() computes x * w^T + b for x [N,K], w [M,K], b [M].
  Id matmul(Id a, Id b, bool trans_a = false, bool trans_b = false);
  Id linear(Id x, Id w, Id b = npos);
  Id add_rowvec(Id x, Id v);
  Id mul_rowvec(Id x, Id v);
  Id mul_colvec(Id x, Id v);  // scales row n of x by v[n]

  // Reductions to a scalar node of shape {1}.
  Id sum_all(Id a);
  Id mean_all(Id a);
  Id mse(Id a, Id b);
  Id charbonnier(Id a, Id b, T eps);

  // Rows of x are normalized independently. gamma/beta/gain may be npos.
  Id layernorm(Id x, Id gamma, Id beta, T eps);
  Id rmsnorm_heads(Id x, Id gain, int heads, T eps);

  // x is [L, heads*head_dim]; tables hold cos/sin per token and pair.
  Id rope(Id x, std::shared_ptr<const RopeTables<T>> tables, int heads);

  // Multi-head scaled dot-product attention over packed heads. q is
  // [Lq, heads*head_dim], k and v are [Lk, heads*head_dim]. bias, if present,
  // is an additive [Lq, Lk] matrix shared across heads (0 or a large negative
  // number to mask a pair).
  Id attention(Id q, Id k, Id v, int heads,
               std::shared_ptr<const Tensor<T>> bias = nullptr);

  // Separable 2d correlation of an [H, W, C] tensor with a 1d kernel applied
  // along both spatial axes, valid mode: output is [H-K+1, W-K+1, C].
  Id sepconv2d(Id x, const Tensor<T>& kernel);

  void backward(Id root);

  const Tensor<T>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  // Allocates a zero gradient if the node was never reached by backward().
  const Tensor<T>& grad(Id id) { return grad_of(id); }
  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first accumulation
    std::function<void()> back;
    bool requires_grad = false;
  };

  Id push(Tensor<T> value, bool requires_grad, std::function<void()> back);
  Tensor<T>& grad_of(Id id);
  bool rg(Id id) const {
    return id != npos && nodes_[static_cast<size_t>(id)].requires_grad;
  }
  const Tensor<T>& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace vitae
