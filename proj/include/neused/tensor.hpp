#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "neused/common.hpp"

namespace neused {

/// Dense row-major tensor of doubles. Images use shape {H, W, 3}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    v.assign(count(shape), fill);
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t size() const { return v.size(); }
  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor like(const Tensor& o, double fill = 0.0) { return Tensor(o.shape, fill); }

  static Tensor gaussian(const std::vector<int>& s, Rng& rng) {
    Tensor t(s);
    for (auto& x : t.v) x = normal_draw(rng);
    return t;
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": tensor shape mismatch");
}

inline double squared_l2(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_l2");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    s += d * d;
  }
  return s;
}

inline double mse(const Tensor& a, const Tensor& b) {
  return squared_l2(a, b) / static_cast<double>(a.size());
}

/// PSNR with peak 1.0; +inf when the inputs are identical.
inline double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(m);
}

}  // namespace neused
