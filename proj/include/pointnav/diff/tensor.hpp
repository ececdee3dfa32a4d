#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pointnav/common.hpp"

namespace pointnav::diff {

// Dense row-major tensor of doubles. Rank 1 ([n]) and rank 2 ([rows x cols])
// cover everything the agent needs; a rank-1 tensor acts as a single row.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(static_cast<size_t>(t.numel_of(t.shape)), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> s, double value) {
    Tensor t = zeros(std::move(s));
    for (double& x : t.v) x = value;
    return t;
  }

  static Tensor row(std::vector<double> values) {
    Tensor t;
    t.shape = {static_cast<int>(values.size())};
    t.v = std::move(values);
    return t;
  }

  static Tensor scalar(double value) { return row({value}); }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      require(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }

  int rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int cols() const {
    if (shape.empty()) return 0;
    return shape.size() == 2 ? shape[1] : shape[0];
  }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool finite() const {
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }
};

}  // namespace pointnav::diff
