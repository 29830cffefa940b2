#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aspectrec/tensor.hpp"

namespace aspectrec {

// Named parameter tensors with per-parameter trainable flags. Slot indices
// are stable for the lifetime of the store, so model structs hold indices and
// Gradients aligns by index. Frozen parameters never receive gradient entries
// and are never updated.
template <class S>
class ParamStore {
 public:
  struct Param {
    std::string name;
    Tensor<S> value;
    bool trainable = true;
  };

  int add(std::string name, Tensor<S> value, bool trainable = true) {
    if (index_.count(name))
      throw std::invalid_argument("duplicate parameter name: " + name);
    const int id = static_cast<int>(params_.size());
    index_.emplace(name, id);
    params_.push_back(Param{std::move(name), std::move(value), trainable});
    return id;
  }

  std::size_t count() const { return params_.size(); }

  Param& param(int id) { return params_.at(static_cast<std::size_t>(id)); }
  const Param& param(int id) const {
    return params_.at(static_cast<std::size_t>(id));
  }

  Tensor<S>& value(int id) { return param(id).value; }
  const Tensor<S>& value(int id) const { return param(id).value; }

  bool trainable(int id) const { return param(id).trainable; }
  void set_trainable(int id, bool on) { param(id).trainable = on; }

  int find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? -1 : it->second;
  }

  // Flips the flag on every parameter whose name starts with `prefix`.
  void set_trainable_prefix(std::string_view prefix, bool on) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) p.trainable = on;
  }

  void freeze_all() {
    for (auto& p : params_) p.trainable = false;
  }

  std::vector<int> ids_with_prefix(std::string_view prefix) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name.rfind(prefix, 0) == 0)
        out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> trainable_ids() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].trainable) out.push_back(static_cast<int>(i));
    return out;
  }

  const std::vector<Param>& all() const { return params_; }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, int> index_;
};

// Gradient slots aligned with ParamStore indices; materialized only for
// trainable parameters.
template <class S>
class Gradients {
 public:
  explicit Gradients(std::size_t n_params) : slots_(n_params), present_(n_params, false) {}
  Gradients() = default;

  void resize(std::size_t n_params) {
    slots_.assign(n_params, {});
    present_.assign(n_params, false);
  }

  bool has(int id) const { return present_.at(static_cast<std::size_t>(id)); }

  Tensor<S>& slot_for(const ParamStore<S>& store, int id) {
    auto& t = slots_.at(static_cast<std::size_t>(id));
    if (!present_[static_cast<std::size_t>(id)]) {
      t = Tensor<S>(store.value(id).shape);
      present_[static_cast<std::size_t>(id)] = true;
    }
    return t;
  }

  const Tensor<S>& get(int id) const {
    if (!has(id)) throw std::out_of_range("no gradient entry for parameter");
    return slots_.at(static_cast<std::size_t>(id));
  }

  // this += other, combining in caller-controlled order.
  void accumulate(const ParamStore<S>& store, const Gradients& other) {
    for (std::size_t i = 0; i < other.slots_.size(); ++i) {
      if (!other.present_[i]) continue;
      Tensor<S>& dst = slot_for(store, static_cast<int>(i));
      const Tensor<S>& src = other.slots_[i];
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (present_[i]) fn(static_cast<int>(i), slots_[i]);
  }

  double squared_norm() const {
    double s = 0;
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (present_[i])
        for (const S v : slots_[i].values)
          s += static_cast<double>(v) * static_cast<double>(v);
    return s;
  }

  void scale(S factor) {
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (present_[i])
        for (S& v : slots_[i].values) v *= factor;
  }

 private:
  std::vector<Tensor<S>> slots_;
  std::vector<bool> present_;
};

// FNV-1a over the raw bit patterns of every parameter whose name starts with
// `prefix`; bitwise freezing checks compare these across training steps.
template <class S>
std::uint64_t bitwise_checksum(const ParamStore<S>& store,
                               std::string_view prefix = "") {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : store.all()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const unsigned char* bytes =
        reinterpret_cast<const unsigned char*>(p.value.values.data());
    const std::size_t n = p.value.values.size() * sizeof(S);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// Plain SGD: trainable parameters step against the gradient, frozen ones are
// untouched no matter what the gradient map contains.
template <class S>
void sgd_step(ParamStore<S>& store, const Gradients<S>& grads, S lr) {
  grads.for_each([&](int id, const Tensor<S>& g) {
    if (!store.trainable(id)) return;
    Tensor<S>& w = store.value(id);
    if (!w.same_shape(g))
      shape_error("sgd_step", w.shape_str(), g.shape_str());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  });
}

}  // namespace aspectrec
