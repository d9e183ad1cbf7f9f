#include "vitae/graph.hpp"

#include <Eigen/Core>

#include <cassert>
#include <cmath>

namespace vitae {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
template <typename T>
using StridedM = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedM = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
typename Graph<T>::Id Graph<T>::push(Tensor<T> value, bool requires_grad,
                                     std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size()) - 1;
}

template <typename T>
Tensor<T>& Graph<T>::grad_of(Id id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Id root) {
  assert(val(root).numel() == 1);
  grad_of(root).data[0] = T(1);
  for (Id i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.back || n.grad.data.empty()) continue;
    n.back();
  }
}

template <typename T>
typename Graph<T>::Id Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  return push(std::move(value), grad_enabled_ && requires_grad, {});
}

template <typename T>
typename Graph<T>::Id Graph<T>::add(Id a, Id b) {
  assert(val(a).same_shape(val(b)));
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out] {
      const Tensor<T>& g = grad_of(out);
      if (rg(a)) {
        Tensor<T>& ga = grad_of(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::sub(Id a, Id b) {
  assert(val(a).same_shape(val(b)));
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out] {
      const Tensor<T>& g = grad_of(out);
      if (rg(a)) {
        Tensor<T>& ga = grad_of(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::mul(Id a, Id b) {
  assert(val(a).same_shape(val(b)));
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& va = val(a);
      const Tensor<T>& vb2 = val(b);
      if (rg(a)) {
        Tensor<T>& ga = grad_of(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::div(Id a, Id b) {
  assert(val(a).same_shape(val(b)));
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] /= vb[i];
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& vy = val(out);
      const Tensor<T>& vb2 = val(b);
      if (rg(a)) {
        Tensor<T>& ga = grad_of(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / vb2[i];
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * vy[i] / vb2[i];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::scale(Id a, T c) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= c;
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out, c] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::add_const(Id a, T c) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += c;
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::silu(Id a) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= sigmoid(y[i]);
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i) {
        T s = sigmoid(x[i]);
        ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::tanh(Id a) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(y[i]);
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& vy = val(out);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga[i] += g[i] * (T(1) - vy[i] * vy[i]);
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::exp(Id a) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::exp(y[i]);
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& vy = val(out);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vy[i];
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::square(Id a) {
  Tensor<T> y = val(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= y[i];
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += T(2) * x[i] * g[i];
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::slice_cols(Id a, int64_t c0, int64_t c1) {
  const Tensor<T>& x = val(a);
  assert(x.rank() == 2 && c0 >= 0 && c0 < c1 && c1 <= x.cols());
  int64_t rows = x.rows(), cols = x.cols(), w = c1 - c0;
  Tensor<T> y({rows, w});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < w; ++j) y.at(r, j) = x[r * cols + c0 + j];
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out, c0, w] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& ga = grad_of(a);
      int64_t cols = ga.cols();
      for (int64_t r = 0; r < g.rows(); ++r)
        for (int64_t j = 0; j < w; ++j) ga[r * cols + c0 + j] += g.at(r, j);
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::gather(Id a,
                                       std::shared_ptr<const GatherPlan<T>> plan) {
  const Tensor<T>& x = val(a);
  assert(plan && x.numel() == plan->in_numel);
  Tensor<T> y(plan->out_shape);
  int64_t m_count = y.numel();
  assert(static_cast<int64_t>(plan->offset.size()) == m_count + 1);
  for (int64_t m = 0; m < m_count; ++m) {
    T acc = T(0);
    for (int64_t e = plan->offset[static_cast<size_t>(m)];
         e < plan->offset[static_cast<size_t>(m) + 1]; ++e) {
      acc += plan->weight[static_cast<size_t>(e)] * x[plan->index[static_cast<size_t>(e)]];
    }
    y[m] = acc;
  }
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out, plan] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& ga = grad_of(a);
      for (int64_t m = 0; m < g.numel(); ++m) {
        T gm = g[m];
        for (int64_t e = plan->offset[static_cast<size_t>(m)];
             e < plan->offset[static_cast<size_t>(m) + 1]; ++e) {
          ga[plan->index[static_cast<size_t>(e)]] +=
              plan->weight[static_cast<size_t>(e)] * gm;
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::embed_row(Id table, int64_t row) {
  const Tensor<T>& t = val(table);
  assert(t.rank() == 2 && row >= 0 && row < t.rows());
  int64_t d = t.cols();
  Tensor<T> y({1, d});
  for (int64_t j = 0; j < d; ++j) y[j] = t[row * d + j];
  bool need = grad_enabled_ && rg(table);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, table, out, row, d] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& gt = grad_of(table);
      for (int64_t j = 0; j < d; ++j) gt[row * d + j] += g[j];
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::matmul(Id a, Id b, bool trans_a, bool trans_b) {
  const Tensor<T>& xa = val(a);
  const Tensor<T>& xb = val(b);
  assert(xa.rank() == 2 && xb.rank() == 2);
  int64_t m = trans_a ? xa.cols() : xa.rows();
  int64_t k = trans_a ? xa.rows() : xa.cols();
  int64_t k2 = trans_b ? xb.cols() : xb.rows();
  int64_t n = trans_b ? xb.rows() : xb.cols();
  assert(k == k2);
  (void)k2;
  Tensor<T> y({m, n});
  {
    CMapM<T> A(xa.ptr(), xa.rows(), xa.cols());
    CMapM<T> B(xb.ptr(), xb.rows(), xb.cols());
    MapM<T> Y(y.ptr(), m, n);
    if (!trans_a && !trans_b) Y.noalias() = A * B;
    else if (trans_a && !trans_b) Y.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) Y.noalias() = A * B.transpose();
    else Y.noalias() = A.transpose() * B.transpose();
  }
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out, trans_a, trans_b, m, n] {
      const Tensor<T>& xg = grad_of(out);
      const Tensor<T>& xa2 = val(a);
      const Tensor<T>& xb2 = val(b);
      CMapM<T> G(xg.ptr(), m, n);
      CMapM<T> A(xa2.ptr(), xa2.rows(), xa2.cols());
      CMapM<T> B(xb2.ptr(), xb2.rows(), xb2.cols());
      if (rg(a)) {
        MapM<T> gA(grad_of(a).ptr(), xa2.rows(), xa2.cols());
        if (!trans_a) {
          if (!trans_b) gA.noalias() += G * B.transpose();
          else gA.noalias() += G * B;
        } else {
          if (!trans_b) gA.noalias() += B * G.transpose();
          else gA.noalias() += B.transpose() * G.transpose();
        }
      }
      if (rg(b)) {
        MapM<T> gB(grad_of(b).ptr(), xb2.rows(), xb2.cols());
        if (!trans_b) {
          if (!trans_a) gB.noalias() += A.transpose() * G;
          else gB.noalias() += A * G;
        } else {
          if (!trans_a) gB.noalias() += G.transpose() * A;
          else gB.noalias() += G.transpose() * A.transpose();
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::linear(Id x, Id w, Id b) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& wv = val(w);
  assert(xv.rank() == 2 && wv.rank() == 2 && xv.cols() == wv.cols());
  int64_t n = xv.rows(), m = wv.rows();
  Tensor<T> y({n, m});
  {
    CMapM<T> X(xv.ptr(), n, xv.cols());
    CMapM<T> W(wv.ptr(), m, wv.cols());
    MapM<T> Y(y.ptr(), n, m);
    Y.noalias() = X * W.transpose();
    if (b != npos) {
      const Tensor<T>& bv = val(b);
      assert(bv.numel() == m);
      for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < m; ++j) y.at(r, j) += bv[j];
    }
  }
  bool need = grad_enabled_ && (rg(x) || rg(w) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, w, b, out, n, m] {
      const Tensor<T>& gv = grad_of(out);
      CMapM<T> G(gv.ptr(), n, m);
      const Tensor<T>& xv2 = val(x);
      const Tensor<T>& wv2 = val(w);
      CMapM<T> X(xv2.ptr(), n, xv2.cols());
      CMapM<T> W(wv2.ptr(), m, wv2.cols());
      if (rg(x)) {
        MapM<T> gX(grad_of(x).ptr(), n, xv2.cols());
        gX.noalias() += G * W;
      }
      if (rg(w)) {
        MapM<T> gW(grad_of(w).ptr(), m, wv2.cols());
        gW.noalias() += G.transpose() * X;
      }
      if (b != npos && rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < m; ++j) gb[j] += gv[r * m + j];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::add_rowvec(Id x, Id v) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& vv = val(v);
  assert(xv.rank() == 2 && vv.numel() == xv.cols());
  int64_t n = xv.rows(), d = xv.cols();
  Tensor<T> y = xv;
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < d; ++j) y[r * d + j] += vv[j];
  bool need = grad_enabled_ && (rg(x) || rg(v));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, v, out, n, d] {
      const Tensor<T>& g = grad_of(out);
      if (rg(x)) {
        Tensor<T>& gx = grad_of(x);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (rg(v)) {
        Tensor<T>& gv = grad_of(v);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::mul_rowvec(Id x, Id v) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& vv = val(v);
  assert(xv.rank() == 2 && vv.numel() == xv.cols());
  int64_t n = xv.rows(), d = xv.cols();
  Tensor<T> y = xv;
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < d; ++j) y[r * d + j] *= vv[j];
  bool need = grad_enabled_ && (rg(x) || rg(v));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, v, out, n, d] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& xv2 = val(x);
      const Tensor<T>& vv2 = val(v);
      if (rg(x)) {
        Tensor<T>& gx = grad_of(x);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * vv2[j];
      }
      if (rg(v)) {
        Tensor<T>& gv = grad_of(v);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gv[j] += g[r * d + j] * xv2[r * d + j];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::mul_colvec(Id x, Id v) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& vv = val(v);
  assert(xv.rank() == 2 && vv.numel() == xv.rows());
  int64_t n = xv.rows(), d = xv.cols();
  Tensor<T> y = xv;
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < d; ++j) y[r * d + j] *= vv[r];
  bool need = grad_enabled_ && (rg(x) || rg(v));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, v, out, n, d] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& xv2 = val(x);
      const Tensor<T>& vv2 = val(v);
      if (rg(x)) {
        Tensor<T>& gx = grad_of(x);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * vv2[r];
      }
      if (rg(v)) {
        Tensor<T>& gv = grad_of(v);
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gv[r] += g[r * d + j] * xv2[r * d + j];
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::sum_all(Id a) {
  const Tensor<T>& x = val(a);
  T acc = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out] {
      T g0 = grad_of(out)[0];
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g0;
    };
  return push(Tensor<T>::scalar(acc), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::mean_all(Id a) {
  const Tensor<T>& x = val(a);
  T acc = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  T inv = T(1) / static_cast<T>(x.numel());
  bool need = grad_enabled_ && rg(a);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, out, inv] {
      T g0 = grad_of(out)[0] * inv;
      Tensor<T>& ga = grad_of(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g0;
    };
  return push(Tensor<T>::scalar(acc * inv), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::mse(Id a, Id b) {
  const Tensor<T>& xa = val(a);
  const Tensor<T>& xb = val(b);
  assert(xa.same_shape(xb));
  T acc = T(0);
  for (int64_t i = 0; i < xa.numel(); ++i) {
    T d = xa[i] - xb[i];
    acc += d * d;
  }
  T inv = T(1) / static_cast<T>(xa.numel());
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out, inv] {
      T c = T(2) * grad_of(out)[0] * inv;
      const Tensor<T>& xa2 = val(a);
      const Tensor<T>& xb2 = val(b);
      if (rg(a)) {
        Tensor<T>& ga = grad_of(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += c * (xa2[i] - xb2[i]);
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_of(b);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= c * (xa2[i] - xb2[i]);
      }
    };
  return push(Tensor<T>::scalar(acc * inv), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::charbonnier(Id a, Id b, T eps) {
  const Tensor<T>& xa = val(a);
  const Tensor<T>& xb = val(b);
  assert(xa.same_shape(xb));
  // accumulate the excess over the eps floor so a zero difference contributes
  // exactly nothing and the loss lands on eps itself
  T acc = T(0);
  for (int64_t i = 0; i < xa.numel(); ++i) {
    T d = xa[i] - xb[i];
    acc += std::hypot(d, eps) - eps;
  }
  T inv = T(1) / static_cast<T>(xa.numel());
  bool need = grad_enabled_ && (rg(a) || rg(b));
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, a, b, out, inv, eps] {
      T g0 = grad_of(out)[0] * inv;
      const Tensor<T>& xa2 = val(a);
      const Tensor<T>& xb2 = val(b);
      for (int64_t i = 0; i < xa2.numel(); ++i) {
        T d = xa2[i] - xb2[i];
        T s = g0 * d / std::hypot(d, eps);
        if (rg(a)) grad_of(a)[i] += s;
        if (rg(b)) grad_of(b)[i] -= s;
      }
    };
  return push(Tensor<T>::scalar(eps + acc * inv), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::layernorm(Id x, Id gamma, Id beta, T eps) {
  const Tensor<T>& xv = val(x);
  assert(xv.rank() == 2);
  int64_t n = xv.rows(), d = xv.cols();
  if (gamma != npos) assert(val(gamma).numel() == d);
  if (beta != npos) assert(val(beta).numel() == d);
  bool need = grad_enabled_ && (rg(x) || rg(gamma) || rg(beta));
  auto norm = std::make_shared<Tensor<T>>();  // (x - mean) / std, kept for backward
  auto inv_std = std::make_shared<Tensor<T>>();
  if (need) {
    *norm = Tensor<T>({n, d});
    *inv_std = Tensor<T>({n});
  }
  Tensor<T> y({n, d});
  for (int64_t r = 0; r < n; ++r) {
    const T* row = xv.ptr() + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      T y0 = (row[j] - mu) * inv;
      if (need) (*norm)[r * d + j] = y0;
      T o = y0;
      if (gamma != npos) o *= val(gamma)[j];
      if (beta != npos) o += val(beta)[j];
      y[r * d + j] = o;
    }
    if (need) (*inv_std)[r] = inv;
  }
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, gamma, beta, out, n, d, norm, inv_std] {
      const Tensor<T>& g = grad_of(out);
      std::vector<T> gh(static_cast<size_t>(d));
      for (int64_t r = 0; r < n; ++r) {
        const T* gr = g.ptr() + r * d;
        const T* y0 = norm->ptr() + r * d;
        for (int64_t j = 0; j < d; ++j)
          gh[static_cast<size_t>(j)] =
              gamma != npos ? gr[j] * val(gamma)[j] : gr[j];
        if (rg(x)) {
          T m1 = T(0), m2 = T(0);
          for (int64_t j = 0; j < d; ++j) {
            m1 += gh[static_cast<size_t>(j)];
            m2 += gh[static_cast<size_t>(j)] * y0[j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          Tensor<T>& gx = grad_of(x);
          T inv = (*inv_std)[r];
          for (int64_t j = 0; j < d; ++j)
            gx[r * d + j] += inv * (gh[static_cast<size_t>(j)] - m1 - y0[j] * m2);
        }
        if (gamma != npos && rg(gamma)) {
          Tensor<T>& gg = grad_of(gamma);
          for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * y0[j];
        }
        if (beta != npos && rg(beta)) {
          Tensor<T>& gb = grad_of(beta);
          for (int64_t j = 0; j < d; ++j) gb[j] += gr[j];
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::rmsnorm_heads(Id x, Id gain, int heads, T eps) {
  const Tensor<T>& xv = val(x);
  assert(xv.rank() == 2 && xv.cols() % heads == 0);
  int64_t n = xv.rows(), d = xv.cols(), hd = d / heads;
  if (gain != npos) assert(val(gain).numel() == d);
  bool need = grad_enabled_ && (rg(x) || rg(gain));
  auto inv_rms = std::make_shared<Tensor<T>>();
  if (need) *inv_rms = Tensor<T>({n, static_cast<int64_t>(heads)});
  Tensor<T> y({n, d});
  for (int64_t r = 0; r < n; ++r) {
    for (int h = 0; h < heads; ++h) {
      const T* seg = xv.ptr() + r * d + h * hd;
      T ms = T(0);
      for (int64_t j = 0; j < hd; ++j) ms += seg[j] * seg[j];
      ms /= static_cast<T>(hd);
      T inv = T(1) / std::sqrt(ms + eps);
      if (need) (*inv_rms)[r * heads + h] = inv;
      T* yo = y.ptr() + r * d + h * hd;
      for (int64_t j = 0; j < hd; ++j) {
        yo[j] = seg[j] * inv;
        if (gain != npos) yo[j] *= val(gain)[h * hd + j];
      }
    }
  }
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, gain, out, n, d, hd, heads, inv_rms] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& xv2 = val(x);
      for (int64_t r = 0; r < n; ++r) {
        for (int h = 0; h < heads; ++h) {
          const T* seg = xv2.ptr() + r * d + h * hd;
          const T* gr = g.ptr() + r * d + h * hd;
          T inv = (*inv_rms)[r * heads + h];
          if (rg(x)) {
            T dot = T(0);
            for (int64_t j = 0; j < hd; ++j) {
              T gh = gain != npos ? gr[j] * val(gain)[h * hd + j] : gr[j];
              dot += gh * seg[j];
            }
            dot *= inv * inv * inv / static_cast<T>(hd);
            Tensor<T>& gx = grad_of(x);
            for (int64_t j = 0; j < hd; ++j) {
              T gh = gain != npos ? gr[j] * val(gain)[h * hd + j] : gr[j];
              gx[r * d + h * hd + j] += gh * inv - seg[j] * dot;
            }
          }
          if (gain != npos && rg(gain)) {
            Tensor<T>& gg = grad_of(gain);
            for (int64_t j = 0; j < hd; ++j)
              gg[h * hd + j] += gr[j] * seg[j] * inv;
          }
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::rope(Id x, std::shared_ptr<const RopeTables<T>> tables,
                                     int heads) {
  const Tensor<T>& xv = val(x);
  assert(xv.rank() == 2 && xv.cols() % heads == 0);
  int64_t n = xv.rows(), d = xv.cols(), hd = d / heads;
  assert(hd % 2 == 0);
  int64_t pairs = hd / 2;
  assert(tables->cos.rows() == n && tables->cos.cols() == pairs);
  Tensor<T> y({n, d});
  const Tensor<T>& cs = tables->cos;
  const Tensor<T>& sn = tables->sin;
  for (int64_t r = 0; r < n; ++r) {
    for (int h = 0; h < heads; ++h) {
      const T* seg = xv.ptr() + r * d + h * hd;
      T* yo = y.ptr() + r * d + h * hd;
      for (int64_t j = 0; j < pairs; ++j) {
        T c = cs[r * pairs + j], s = sn[r * pairs + j];
        T x0 = seg[2 * j], x1 = seg[2 * j + 1];
        yo[2 * j] = x0 * c - x1 * s;
        yo[2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
  bool need = grad_enabled_ && rg(x);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, out, tables, heads, n, d, hd] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T>& gx = grad_of(x);
      int64_t pairs = hd / 2;
      const Tensor<T>& cs = tables->cos;
      const Tensor<T>& sn = tables->sin;
      for (int64_t r = 0; r < n; ++r) {
        for (int h = 0; h < heads; ++h) {
          const T* gr = g.ptr() + r * d + h * hd;
          T* go = gx.ptr() + r * d + h * hd;
          for (int64_t j = 0; j < pairs; ++j) {
            T c = cs[r * pairs + j], s = sn[r * pairs + j];
            T g0 = gr[2 * j], g1 = gr[2 * j + 1];
            go[2 * j] += g0 * c + g1 * s;
            go[2 * j + 1] += -g0 * s + g1 * c;
          }
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::attention(Id q, Id k, Id v, int heads,
                                          std::shared_ptr<const Tensor<T>> bias) {
  const Tensor<T>& qv = val(q);
  const Tensor<T>& kv = val(k);
  const Tensor<T>& vv = val(v);
  assert(qv.rank() == 2 && kv.rank() == 2 && vv.rank() == 2);
  assert(qv.cols() == kv.cols() && kv.same_shape(vv));
  assert(qv.cols() % heads == 0);
  int64_t lq = qv.rows(), lk = kv.rows(), d = qv.cols(), hd = d / heads;
  if (bias) assert(bias->rows() == lq && bias->cols() == lk);
  T sc = T(1) / std::sqrt(static_cast<T>(hd));
  bool need = grad_enabled_ && (rg(q) || rg(k) || rg(v));
  auto probs = std::make_shared<Tensor<T>>();
  if (need) *probs = Tensor<T>({static_cast<int64_t>(heads), lq, lk});
  Tensor<T> y({lq, d});
  for (int h = 0; h < heads; ++h) {
    CStridedM<T> Qh(qv.ptr() + h * hd, lq, hd, Eigen::OuterStride<>(d));
    CStridedM<T> Kh(kv.ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
    CStridedM<T> Vh(vv.ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
    Mat<T> S(lq, lk);
    S.noalias() = Qh * Kh.transpose();
    S *= sc;
    if (bias) S += CMapM<T>(bias->ptr(), lq, lk);
    for (int64_t r = 0; r < lq; ++r) {
      T mx = S.row(r).maxCoeff();
      S.row(r) = (S.row(r).array() - mx).exp();
      T sum = S.row(r).sum();
      S.row(r) /= sum;
    }
    StridedM<T> Yh(y.ptr() + h * hd, lq, hd, Eigen::OuterStride<>(d));
    Yh.noalias() = S * Vh;
    if (need) {
      MapM<T> Ph(probs->ptr() + static_cast<int64_t>(h) * lq * lk, lq, lk);
      Ph = S;
    }
  }
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, q, k, v, out, heads, lq, lk, d, hd, sc, probs] {
      const Tensor<T>& g = grad_of(out);
      const Tensor<T>& qv2 = val(q);
      const Tensor<T>& kv2 = val(k);
      const Tensor<T>& vv2 = val(v);
      for (int h = 0; h < heads; ++h) {
        CStridedM<T> Qh(qv2.ptr() + h * hd, lq, hd, Eigen::OuterStride<>(d));
        CStridedM<T> Kh(kv2.ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
        CStridedM<T> Vh(vv2.ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
        CStridedM<T> Gh(g.ptr() + h * hd, lq, hd, Eigen::OuterStride<>(d));
        CMapM<T> P(probs->ptr() + static_cast<int64_t>(h) * lq * lk, lq, lk);
        if (rg(v)) {
          StridedM<T> gV(grad_of(v).ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
          gV.noalias() += P.transpose() * Gh;
        }
        if (rg(q) || rg(k)) {
          Mat<T> dP(lq, lk);
          dP.noalias() = Gh * Vh.transpose();
          Mat<T> dS = P.array() * dP.array();
          for (int64_t r = 0; r < lq; ++r) {
            T rowdot = dS.row(r).sum();
            dS.row(r) = P.row(r).array() * (dP.row(r).array() - rowdot);
          }
          dS *= sc;
          if (rg(q)) {
            StridedM<T> gQ(grad_of(q).ptr() + h * hd, lq, hd, Eigen::OuterStride<>(d));
            gQ.noalias() += dS * Kh;
          }
          if (rg(k)) {
            StridedM<T> gK(grad_of(k).ptr() + h * hd, lk, hd, Eigen::OuterStride<>(d));
            gK.noalias() += dS.transpose() * Qh;
          }
        }
      }
    };
  return push(std::move(y), need, std::move(back));
}

template <typename T>
typename Graph<T>::Id Graph<T>::sepconv2d(Id x, const Tensor<T>& kernel) {
  const Tensor<T>& xv = val(x);
  assert(xv.rank() == 3 && kernel.rank() == 1);
  int64_t ih = xv.dim(0), iw = xv.dim(1), c = xv.dim(2), kk = kernel.numel();
  assert(ih >= kk && iw >= kk);
  int64_t ow = iw - kk + 1, oh = ih - kk + 1;
  Tensor<T> ker = kernel;
  Tensor<T> tmp({ih, ow, c});
  for (int64_t r = 0; r < ih; ++r)
    for (int64_t w = 0; w < ow; ++w)
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (int64_t i = 0; i < kk; ++i) acc += ker[i] * xv.at(r, w + i, ch);
        tmp.at(r, w, ch) = acc;
      }
  Tensor<T> y({oh, ow, c});
  for (int64_t r = 0; r < oh; ++r)
    for (int64_t w = 0; w < ow; ++w)
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (int64_t i = 0; i < kk; ++i) acc += ker[i] * tmp.at(r + i, w, ch);
        y.at(r, w, ch) = acc;
      }
  bool need = grad_enabled_ && rg(x);
  Id out = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (need)
    back = [this, x, out, ker, ih, iw, c, kk, oh, ow] {
      const Tensor<T>& g = grad_of(out);
      Tensor<T> dtmp({ih, ow, c});
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t w = 0; w < ow; ++w)
          for (int64_t ch = 0; ch < c; ++ch) {
            T gv = g.at(r, w, ch);
            for (int64_t i = 0; i < kk; ++i) dtmp.at(r + i, w, ch) += ker[i] * gv;
          }
      Tensor<T>& gx = grad_of(x);
      for (int64_t r = 0; r < ih; ++r)
        for (int64_t w = 0; w < ow; ++w)
          for (int64_t ch = 0; ch < c; ++ch) {
            T gv = dtmp.at(r, w, ch);
            for (int64_t i = 0; i < kk; ++i)
              gx[(r * iw + w + i) * c + ch] += ker[i] * gv;
          }
    };
  return push(std::move(y), need, std::move(back));
}

template class Graph<float>;
template class Graph<double>;

}  // namespace vitae
