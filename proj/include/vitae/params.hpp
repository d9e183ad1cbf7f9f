#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitae/graph.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

// Named parameter tensors in a stable creation order, each with a gradient
// slot of the same shape. The order is part of the contract: checkpoints,
// optimizer state and graph binding all walk entries() front to back.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (by_name_.count(name)) throw std::runtime_error("duplicate parameter " + name);
    by_name_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.grad = Tensor<T>(init.shape);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  size_t index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::runtime_error("unknown parameter " + name);
    return it->second;
  }

  Tensor<T>& operator[](const std::string& name) {
    return entries_[index_of(name)].value;
  }
  const Tensor<T>& operator[](const std::string& name) const {
    return entries_[index_of(name)].value;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_)
      std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  int64_t step = 0;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> by_name_;
};

// Leaf ids of one store's parameters inside one graph, parallel to entries().
template <typename T>
struct Bound {
  Graph<T>* g = nullptr;
  const ParamStore<T>* store = nullptr;
  std::vector<typename Graph<T>::Id> ids;

  typename Graph<T>::Id operator[](const std::string& name) const {
    return ids[store->index_of(name)];
  }
};

template <typename T>
Bound<T> bind(Graph<T>& g, const ParamStore<T>& store, bool requires_grad = true) {
  Bound<T> b;
  b.g = &g;
  b.store = &store;
  b.ids.reserve(store.entries().size());
  for (const auto& e : store.entries()) b.ids.push_back(g.leaf(e.value, requires_grad));
  return b;
}

// Adds this graph's parameter gradients into the store's gradient slots.
template <typename T>
void collect_grads(const Bound<T>& b, ParamStore<T>& store) {
  for (size_t i = 0; i < b.ids.size(); ++i) {
    const Tensor<T>& g = b.g->grad(b.ids[i]);
    Tensor<T>& slot = store.entries()[i].grad;
    for (int64_t j = 0; j < slot.numel(); ++j) slot[j] += g[j];
  }
}

// Initializers draw in double and cast, so float and double stores built from
// the same seed hold the same values up to rounding.
template <typename T>
Tensor<T> normal_init(std::vector<int64_t> shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> const_init(std::vector<int64_t> shape, double v) {
  return Tensor<T>(std::move(shape), static_cast<T>(v));
}

}  // namespace vitae
