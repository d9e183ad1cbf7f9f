#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vitae/graph.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

// Finite-difference gradient checking at double precision. The builder gets a
// graph plus the ids of the leaves created from `inputs` (in order) and must
// return a scalar node. Central differences with step h; the relative error of
// each checked coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
struct GradCheckResult {
  double max_rel = 0.0;
  double max_abs = 0.0;
  int checked = 0;
};

using BuildFn = std::function<Graph<double>::Id(Graph<double>&,
                                                const std::vector<Graph<double>::Id>&)>;

inline double eval_scalar(const std::vector<Tensor<double>>& inputs,
                          const BuildFn& build) {
  Graph<double> g(false);
  std::vector<Graph<double>::Id> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(g.leaf(t, false));
  Graph<double>::Id loss = build(g, ids);
  return g.value(loss)[0];
}

inline GradCheckResult grad_check(const std::vector<Tensor<double>>& inputs,
                                  const BuildFn& build, double h = 1e-5,
                                  int max_coords = 200, uint64_t seed = 1) {
  Graph<double> g(true);
  std::vector<Graph<double>::Id> ids;
  for (const auto& t : inputs) ids.push_back(g.leaf(t, true));
  Graph<double>::Id loss = build(g, ids);
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (auto id : ids) analytic.push_back(g.grad(id));

  GradCheckResult res;
  Rng rng(seed);
  for (size_t i = 0; i < inputs.size(); ++i) {
    int64_t n = inputs[i].numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      for (int64_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int c = 0; c < max_coords; ++c) coords.push_back(rng.uniform_int(n));
    }
    for (int64_t c : coords) {
      std::vector<Tensor<double>> mod = inputs;
      mod[i][c] = inputs[i][c] + h;
      double fp = eval_scalar(mod, build);
      mod[i][c] = inputs[i][c] - h;
      double fm = eval_scalar(mod, build);
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[i][c];
      double abs_err = std::abs(a - numeric);
      double rel = abs_err / std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_abs = std::max(res.max_abs, abs_err);
      res.max_rel = std::max(res.max_rel, rel);
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng,
                                    double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

}  // namespace vitae
