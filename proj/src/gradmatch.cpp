#include "ginv/gradmatch.hpp"

#include <cmath>
#include <stdexcept>

namespace ginv {

using namespace tape;

namespace {

void check_pair(const GradientCapture& a, const GradientCapture& b,
                const LayerWeighting& w) {
  if (!a.same_manifest(b))
    throw std::runtime_error("gradient distance: manifest mismatch");
  if (w.weights.size() != a.entries.size())
    throw std::runtime_error("gradient distance: weighting length mismatch");
  if (w.total() <= 0)
    throw std::runtime_error("gradient distance: all-zero weighting");
}

}  // namespace

DistanceResult cosine_distance(const GradientCapture& a,
                               const GradientCapture& b,
                               const LayerWeighting& w) {
  check_pair(a, b, w);
  DistanceResult r;
  double acc = 0;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const Tensor& ga = a.entries[i].second;
    const Tensor& gb = b.entries[i].second;
    double na = ga.norm(), nb = gb.norm();
    double d;
    if (na == 0.0 || nb == 0.0) {
      d = 1.0;  // maximal cosine distance rather than NaN
      r.zero_norm_warning = true;
    } else {
      d = 1.0 - ga.dot(gb) / (na * nb);
    }
    acc += w.weights[i] * d;
  }
  r.value = acc / w.total();
  return r;
}

DistanceResult euclidean_distance(const GradientCapture& a,
                                  const GradientCapture& b,
                                  const LayerWeighting& w) {
  check_pair(a, b, w);
  DistanceResult r;
  double acc = 0;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const Tensor& ga = a.entries[i].second;
    const Tensor& gb = b.entries[i].second;
    double sq = 0;
    for (size_t j = 0; j < ga.data.size(); ++j) {
      double d = ga.data[j] - gb.data[j];
      sq += d * d;
    }
    acc += w.weights[i] * sq;
  }
  r.value = acc;
  return r;
}

double tv_prior(const Tensor& image) {
  if (image.rank() != 3)
    throw std::runtime_error("tv_prior: expected (H,W,C) image");
  int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const double* d = image.data.data();
  auto at = [&](int y, int x, int ch) {
    return d[(static_cast<size_t>(y) * w + x) * c + ch];
  };
  double tv = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x)
        tv += std::abs(at(y, x + 1, ch) - at(y, x, ch));
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x)
        tv += std::abs(at(y + 1, x, ch) - at(y, x, ch));
  }
  return tv;
}

ClipResult clip_to_prior(const Tensor& g_gm, const Tensor& g_p, double zeta) {
  if (!g_gm.same_shape(g_p))
    throw std::runtime_error("clip_to_prior: shape mismatch");
  if (zeta <= 0) throw std::runtime_error("clip_to_prior: zeta must be > 0");
  ClipResult r;
  double np = g_p.norm();
  if (np == 0.0) {
    r.g = g_gm;
    r.degenerate = true;
    return r;
  }
  double ngm = g_gm.norm();
  double factor = std::max(1.0, ngm / (zeta * np));
  r.g = g_gm.scaled(1.0 / factor);
  r.clipped = factor > 1.0;
  return r;
}

LayerWeighting window_at_step(int step, int total_steps, int layer_count,
                              const WindowParams& params) {
  if (step < 0 || step >= total_steps)
    throw std::runtime_error("window_at_step: step out of range");
  double center =
      total_steps == 1
          ? 1.0
          : 1.0 - static_cast<double>(step) / static_cast<double>(total_steps - 1);
  LayerWeighting w;
  w.weights.resize(static_cast<size_t>(layer_count));
  for (int l = 0; l < layer_count; ++l) {
    double depth = layer_count == 1
                       ? 1.0
                       : static_cast<double>(l) / static_cast<double>(layer_count - 1);
    double width = depth < center ? params.left_width : params.right_width;
    double u = (depth - center) / width;
    double ham = std::abs(u) <= 1.0
                     ? 0.54 + 0.46 * std::cos(3.14159265358979323846 * u)
                     : 0.0;
    w.weights[static_cast<size_t>(l)] =
        params.floor + (1.0 - params.floor) * ham;
  }
  return w;
}

// ---- tape-side -------------------------------------------------------------

namespace {
constexpr double kNormGuard = 1e-30;
}

Var cosine_distance_var(Graph& g, const std::vector<Var>& synth,
                        const GradientCapture& observed,
                        const LayerWeighting& w) {
  if (synth.size() != observed.entries.size() ||
      w.weights.size() != synth.size())
    throw std::runtime_error("cosine_distance_var: layer count mismatch");
  Var acc = g.constant_scalar(0.0);
  for (size_t i = 0; i < synth.size(); ++i) {
    if (w.weights[i] == 0.0) continue;
    Var ga = synth[i];
    Var gb = g.constant(observed.entries[i].second);
    Var dot = dot_all(ga, gb);
    Var denom = sqrt(add_scalar(mul(sq_norm(ga), sq_norm(gb)), kNormGuard));
    Var cos = mul(dot, reciprocal(denom));
    Var dist = add_scalar(neg(cos), 1.0);
    acc = add(acc, scale(dist, w.weights[i]));
  }
  return scale(acc, 1.0 / w.total());
}

Var global_cosine_distance_var(Graph& g, const std::vector<Var>& synth,
                               const GradientCapture& observed) {
  if (synth.size() != observed.entries.size())
    throw std::runtime_error("global_cosine_distance_var: layer mismatch");
  Var dot = g.constant_scalar(0.0);
  Var qa = g.constant_scalar(0.0);
  double qb = 0.0;
  for (size_t i = 0; i < synth.size(); ++i) {
    Var gb = g.constant(observed.entries[i].second);
    dot = add(dot, dot_all(synth[i], gb));
    qa = add(qa, sq_norm(synth[i]));
    qb += observed.entries[i].second.dot(observed.entries[i].second);
  }
  Var denom = sqrt(add_scalar(scale(qa, qb), kNormGuard));
  return add_scalar(neg(mul(dot, reciprocal(denom))), 1.0);
}

Var tv_prior_var(Graph& g, Var x2d, int h, int w, int c) {
  // Difference operators as sparse maps over pixel index (row-major H*W).
  auto build_diff = [&](bool horizontal) {
    int rows = horizontal ? h * (w - 1) : (h - 1) * w;
    std::vector<int> indptr(static_cast<size_t>(rows) + 1);
    std::vector<int> indices;
    std::vector<double> values;
    indices.reserve(static_cast<size_t>(rows) * 2);
    values.reserve(static_cast<size_t>(rows) * 2);
    int r = 0;
    for (int y = 0; y < (horizontal ? h : h - 1); ++y) {
      for (int x = 0; x < (horizontal ? w - 1 : w); ++x) {
        int p = y * w + x;
        int q = horizontal ? p + 1 : p + w;
        indptr[static_cast<size_t>(r)] = static_cast<int>(indices.size());
        indices.push_back(q);
        values.push_back(1.0);
        indices.push_back(p);
        values.push_back(-1.0);
        ++r;
      }
    }
    indptr[static_cast<size_t>(rows)] = static_cast<int>(indices.size());
    return Csr::build(rows, h * w, indptr, indices, values);
  };
  Var dh = sum_all(abs(csr_apply(x2d, build_diff(true))));
  Var dv = sum_all(abs(csr_apply(x2d, build_diff(false))));
  return add(dh, dv);
}

}  // namespace ginv
