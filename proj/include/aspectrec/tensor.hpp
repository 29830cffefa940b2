#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aspectrec {

// Dense row-major tensor. Rank 0 (scalar), 1 and 2 cover everything in this
// project; the value count always equals the product of the dims.
template <class S>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<S> values;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims)
      : shape(std::move(dims)), values(count_of(shape), S(0)) {}

  static Tensor scalar(S v) {
    Tensor t{std::vector<std::size_t>{}};
    t.values.assign(1, v);
    return t;
  }

  static Tensor vec(std::vector<S> v) {
    Tensor t;
    t.shape = {v.size()};
    t.values = std::move(v);
    return t;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols) {
    return Tensor{std::vector<std::size_t>{rows, cols}};
  }

  static std::size_t count_of(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() >= 1 ? shape[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  S* data() { return values.data(); }
  const S* data() const { return values.data(); }

  S& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  S at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  S& operator[](std::size_t i) { return values[i]; }
  S operator[](std::size_t i) const { return values[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(S v) { values.assign(values.size(), v); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.values.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      out.values[i] = static_cast<T>(values[i]);
    return out;
  }
};

[[noreturn]] inline void shape_error(const std::string& op,
                                     const std::string& lhs,
                                     const std::string& rhs) {
  throw std::invalid_argument("shape mismatch in " + op + ": " + lhs + " vs " +
                              rhs);
}

}  // namespace aspectrec
