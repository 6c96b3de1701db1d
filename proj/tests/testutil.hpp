#pragma once

#include <functional>

#include "ginv/tensor.hpp"

namespace ginv::testutil {

// Central finite differences of a scalar-valued function at x.
// Independent oracle for analytic gradients; h defaults to a scale
// appropriate for doubles and unit-magnitude inputs.
inline Tensor finite_diff(const std::function<double(const Tensor&)>& f,
                          const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape);
  Tensor probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    double orig = probe.data[i];
    probe.data[i] = orig + h;
    double fp = f(probe);
    probe.data[i] = orig - h;
    double fm = f(probe);
    probe.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Relative agreement in the style of classic gradient checkers:
// max_i |a_i - b_i| / max(1, |a_i|, |b_i|).
inline double grad_rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double denom = std::max({1.0, std::abs(a.data[i]), std::abs(b.data[i])});
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return worst;
}

}  // namespace ginv::testutil
