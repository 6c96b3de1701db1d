#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ginv/rng.hpp"

namespace ginv {

// Dense row-major tensor of doubles. Image layout throughout the library is
// channels-last: a single image is (H, W, C), a batch is (B, H, W, C).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    assert(static_cast<int64_t>(data.size()) == count(shape));
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int> s, Rng& rng) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.normal();
    return t;
  }
  static Tensor rand_uniform(std::vector<int> s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
  }

  Tensor reshaped(std::vector<int> s) const {
    assert(count(s) == numel());
    return Tensor(std::move(s), data);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
  double dot(const Tensor& o) const {
    assert(numel() == o.numel());
    double s = 0.0;
    for (size_t i = 0; i < data.size(); ++i) s += data[i] * o.data[i];
    return s;
  }
  double norm() const { return std::sqrt(dot(*this)); }
  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    assert(numel() == o.numel());
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    assert(numel() == o.numel());
    for (size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
    return *this;
  }
  Tensor& operator*=(double c) {
    for (auto& v : data) v *= c;
    return *this;
  }

  Tensor scaled(double c) const {
    Tensor t = *this;
    t *= c;
    return t;
  }

  void clamp_(double lo, double hi) {
    for (auto& v : data) v = std::min(hi, std::max(lo, v));
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

inline Tensor operator+(Tensor a, const Tensor& b) { a += b; return a; }
inline Tensor operator-(Tensor a, const Tensor& b) { a -= b; return a; }

// Max over |a - b| / (atol + rtol * |b|), useful in tests.
inline double max_rel_err(const Tensor& a, const Tensor& b, double rtol,
                          double atol = 1e-12) {
  assert(a.numel() == b.numel());
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double denom = atol + rtol * std::abs(b.data[i]);
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return worst;
}

inline bool allclose(const Tensor& a, const Tensor& b, double rtol,
                     double atol = 1e-12) {
  return a.numel() == b.numel() && max_rel_err(a, b, rtol, atol) <= 1.0;
}

}  // namespace ginv
