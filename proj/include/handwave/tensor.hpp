#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "handwave/errors.hpp"
#include "handwave/rng.hpp"

namespace handwave {

// Dense row-major array of doubles. Dumb value type; all interesting
// behaviour lives in the tape ops.
struct NdArray {
  std::vector<int> shape;
  std::vector<double> data;

  NdArray() = default;
  explicit NdArray(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }
  NdArray(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw ShapeError("NdArray: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("NdArray: negative dimension in shape " + shape_str(s));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  static NdArray zeros(std::vector<int> s) { return NdArray(std::move(s)); }

  static NdArray full(std::vector<int> s, double v) {
    NdArray a(std::move(s));
    for (double& x : a.data) x = v;
    return a;
  }

  static NdArray scalar(double v) { return NdArray({1}, {v}); }

  // 2-D literal, e.g. NdArray::matrix({{1,2},{3,4}}).
  static NdArray matrix(std::initializer_list<std::initializer_list<double>> rows) {
    int r = static_cast<int>(rows.size());
    int c = r ? static_cast<int>(rows.begin()->size()) : 0;
    NdArray a({r, c});
    std::size_t k = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) throw ShapeError("NdArray::matrix: ragged rows");
      for (double v : row) a.data[k++] = v;
    }
    return a;
  }

  static NdArray randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    NdArray a(std::move(s));
    for (double& x : a.data) x = rng.normal() * stddev;
    return a;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("NdArray::dim: axis out of range for " + shape_str(shape));
    return shape[static_cast<std::size_t>(i)];
  }

  // Rows-by-cols view of any array: last dimension is the column count.
  int last_dim() const {
    if (shape.empty()) throw ShapeError("NdArray: scalar-shaped array has no last dimension");
    return shape.back();
  }
  std::size_t row_count() const {
    int c = last_dim();
    return c == 0 ? 0 : numel() / static_cast<std::size_t>(c);
  }
  double* row(std::size_t r) { return data.data() + r * static_cast<std::size_t>(last_dim()); }
  const double* row(std::size_t r) const {
    return data.data() + r * static_cast<std::size_t>(last_dim());
  }

  double& at(int i, int j) {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(j)];
  }
  double at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(j)];
  }

  bool same_shape(const NdArray& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double max_abs_diff(const NdArray& a, const NdArray& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_abs_diff: shape mismatch " + NdArray::shape_str(a.shape) + " vs " +
                     NdArray::shape_str(b.shape));
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace handwave
