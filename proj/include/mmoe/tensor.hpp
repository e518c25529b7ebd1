#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmoe/error.hpp"

namespace mmoe {

// Scalar type for the trained system. Gradient-check suites instantiate the
// kernel with double explicitly; the MMOE_REAL64 flag switches the default.
#ifdef MMOE_REAL64
using real = double;
#else
using real = float;
#endif

// Dense row-major tensor. Image batches are (N,C,H,W); fully connected
// activations are (N,F).
template <class T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> s, T fill = T(0))
      : shape(std::move(s)), data(checked_numel(shape), fill) {}

  TensorT(std::vector<int> s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != checked_numel(shape)) {
      throw ShapeError("tensor data length does not match shape");
    }
  }

  static std::size_t checked_numel(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int e : s) {
      if (e <= 0) throw ShapeError("tensor extents must be positive");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  T& at2(int n, int f) { return data[static_cast<std::size_t>(n) * dim(1) + f]; }
  const T& at2(int n, int f) const { return data[static_cast<std::size_t>(n) * dim(1) + f]; }

  bool same_shape(const TensorT& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

// Copies data into a new shape with identical element count.
template <class T>
TensorT<T> reshape(const TensorT<T>& t, std::vector<int> new_shape) {
  TensorT<T> out(std::move(new_shape));
  if (out.numel() != t.numel()) throw ShapeError("reshape changes element count");
  out.data = t.data;
  return out;
}

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

using Tensor = TensorT<real>;

}  // namespace mmoe
