#include "ginv/augment.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <stdexcept>

#include "ginv/rng.hpp"

namespace ginv {

using namespace tape;

namespace {

// Triangle-kernel weights for one axis; kernel support widens by the scale
// factor when downscaling (antialias).
std::vector<std::vector<std::pair<int, double>>> axis_weights(int in_n,
                                                              int out_n) {
  double scale = static_cast<double>(in_n) / out_n;
  double support = std::max(1.0, scale);
  std::vector<std::vector<std::pair<int, double>>> rows(
      static_cast<size_t>(out_n));
  for (int o = 0; o < out_n; ++o) {
    double center = (o + 0.5) * scale - 0.5;
    int lo = static_cast<int>(std::floor(center - support));
    int hi = static_cast<int>(std::ceil(center + support));
    double total = 0;
    std::vector<std::pair<int, double>> taps;
    for (int i = lo; i <= hi; ++i) {
      double w = 1.0 - std::abs(i - center) / support;
      if (w <= 0) continue;
      int src = std::min(in_n - 1, std::max(0, i));  // clamp to edge
      taps.emplace_back(src, w);
      total += w;
    }
    for (auto& [src, w] : taps) w /= total;
    rows[static_cast<size_t>(o)] = std::move(taps);
  }
  return rows;
}

std::shared_ptr<Csr> csr_from_rows(
    int out_rows, int in_cols,
    const std::vector<std::vector<std::pair<int, double>>>& rows) {
  std::vector<int> indptr(static_cast<size_t>(out_rows) + 1, 0);
  std::vector<int> indices;
  std::vector<double> values;
  for (int r = 0; r < out_rows; ++r) {
    indptr[static_cast<size_t>(r)] = static_cast<int>(indices.size());
    for (const auto& [src, w] : rows[static_cast<size_t>(r)]) {
      indices.push_back(src);
      values.push_back(w);
    }
  }
  indptr[static_cast<size_t>(out_rows)] = static_cast<int>(indices.size());
  return Csr::build(out_rows, in_cols, indptr, indices, values);
}

}  // namespace

std::shared_ptr<Csr> build_resize_map(int in_h, int in_w, int out_h, int out_w) {
  auto hw = axis_weights(in_h, out_h);
  auto ww = axis_weights(in_w, out_w);
  std::vector<std::vector<std::pair<int, double>>> rows(
      static_cast<size_t>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      std::map<int, double> acc;  // combine duplicate taps from edge clamp
      for (const auto& [sy, wy] : hw[static_cast<size_t>(oy)])
        for (const auto& [sx, wx] : ww[static_cast<size_t>(ox)])
          acc[sy * in_w + sx] += wy * wx;
      auto& row = rows[static_cast<size_t>(oy) * out_w + ox];
      row.assign(acc.begin(), acc.end());
    }
  }
  return csr_from_rows(out_h * out_w, in_h * in_w, rows);
}

Tensor resize_image(const Tensor& img, int out_h, int out_w) {
  if (img.rank() != 3) throw std::runtime_error("resize_image: expected (H,W,C)");
  int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Graph g;
  Var v = csr_apply(g.constant(img.reshaped({h * w, c})),
                    build_resize_map(h, w, out_h, out_w));
  return v.val().reshaped({out_h, out_w, c});
}

namespace {

// Homography fitted through 4 point pairs (output corner -> source corner),
// used as an inverse warp for bilinear sampling.
struct Homography {
  double m[9];

  static Homography fit(const double src[4][2], const double dst[4][2]) {
    // Solve for H with H*dst ~ src (inverse map), h22 = 1.
    Eigen::Matrix<double, 8, 8> A = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
      double x = dst[i][0], y = dst[i][1];
      double u = src[i][0], v = src[i][1];
      A(2 * i, 0) = x; A(2 * i, 1) = y; A(2 * i, 2) = 1;
      A(2 * i, 6) = -u * x; A(2 * i, 7) = -u * y;
      b(2 * i) = u;
      A(2 * i + 1, 3) = x; A(2 * i + 1, 4) = y; A(2 * i + 1, 5) = 1;
      A(2 * i + 1, 6) = -v * x; A(2 * i + 1, 7) = -v * y;
      b(2 * i + 1) = v;
    }
    Eigen::Matrix<double, 8, 1> h = A.partialPivLu().solve(b);
    Homography out;
    for (int i = 0; i < 8; ++i) out.m[i] = h(i);
    out.m[8] = 1.0;
    return out;
  }

  void apply(double x, double y, double* u, double* v) const {
    double w = m[6] * x + m[7] * y + m[8];
    *u = (m[0] * x + m[1] * y + m[2]) / w;
    *v = (m[3] * x + m[4] * y + m[5]) / w;
  }
};

std::shared_ptr<Csr> perspective_map(int h, int w, double scale, Rng& rng) {
  // Displace each corner by up to scale/4 of the image extent.
  double src[4][2] = {{0, 0},
                      {static_cast<double>(w - 1), 0},
                      {static_cast<double>(w - 1), static_cast<double>(h - 1)},
                      {0, static_cast<double>(h - 1)}};
  double dst[4][2];
  for (int i = 0; i < 4; ++i) {
    dst[i][0] = src[i][0] + rng.uniform(-scale * w / 4.0, scale * w / 4.0);
    dst[i][1] = src[i][1] + rng.uniform(-scale * h / 4.0, scale * h / 4.0);
  }
  Homography hg = Homography::fit(src, dst);

  std::vector<std::vector<std::pair<int, double>>> rows(
      static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double u, v;
      hg.apply(x, y, &u, &v);
      // Bilinear taps with clamp-to-edge.
      double uc = std::min(static_cast<double>(w - 1), std::max(0.0, u));
      double vc = std::min(static_cast<double>(h - 1), std::max(0.0, v));
      int x0 = static_cast<int>(std::floor(uc)), y0 = static_cast<int>(std::floor(vc));
      int x1 = std::min(w - 1, x0 + 1), y1 = std::min(h - 1, y0 + 1);
      double fx = uc - x0, fy = vc - y0;
      std::map<int, double> acc;
      acc[y0 * w + x0] += (1 - fx) * (1 - fy);
      acc[y0 * w + x1] += fx * (1 - fy);
      acc[y1 * w + x0] += (1 - fx) * fy;
      acc[y1 * w + x1] += fx * fy;
      rows[static_cast<size_t>(y) * w + x].assign(acc.begin(), acc.end());
    }
  }
  return csr_from_rows(h * w, h * w, rows);
}

std::shared_ptr<Csr> blur_map(int h, int w, int k, double sigma) {
  int r = k / 2;
  std::vector<double> kern(static_cast<size_t>(k) * k);
  double total = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      kern[static_cast<size_t>(dy + r) * k + (dx + r)] = v;
      total += v;
    }
  for (auto& v : kern) v /= total;

  std::vector<std::vector<std::pair<int, double>>> rows(
      static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::map<int, double> acc;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          int sy = std::min(h - 1, std::max(0, y + dy));
          int sx = std::min(w - 1, std::max(0, x + dx));
          acc[sy * w + sx] += kern[static_cast<size_t>(dy + r) * k + (dx + r)];
        }
      rows[static_cast<size_t>(y) * w + x].assign(acc.begin(), acc.end());
    }
  return csr_from_rows(h * w, h * w, rows);
}

Var luma(Graph& g, Var x2d, int c) {
  Tensor wl({c, 1});
  if (c == 3) {
    wl.data = {0.299, 0.587, 0.114};
  } else {
    for (auto& v : wl.data) v = 1.0 / c;
  }
  return matmul(x2d, g.constant(wl));
}

}  // namespace

Var make_batch_var(Graph& g, Var x_hat, int batch, const AugmentSpec& spec,
                   uint64_t seed) {
  const Tensor& tv = x_hat.val();
  if (tv.rank() != 4 || tv.dim(0) != 1)
    throw std::runtime_error("make_batch_var: expected (1,H,W,C)");
  if (batch < 1) throw std::runtime_error("make_batch_var: batch must be >= 1");
  int h = tv.dim(1), w = tv.dim(2), c = tv.dim(3);
  int oh = spec.out_height > 0 ? spec.out_height : h;
  int ow = spec.out_width > 0 ? spec.out_width : w;

  std::shared_ptr<Csr> resize;
  if (oh != h || ow != w) resize = build_resize_map(h, w, oh, ow);

  Var base = reshape(x_hat, {h * w, c});
  std::vector<Var> parts;
  parts.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    Var v = base;

    if (spec.noise && rng.bernoulli(spec.apply_probability)) {
      double sigma = rng.uniform(0.0, spec.noise_sigma);
      Tensor n({h * w, c});
      for (auto& e : n.data) e = sigma * rng.normal();
      v = add(v, g.constant(n));
    }

    if (spec.color_jitter && rng.bernoulli(spec.apply_probability)) {
      double fb = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness);
      double fc = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
      double fs = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation);
      v = scale(v, fb);
      // Contrast blends against the mean gray level.
      Var mean_gray = mean_all(luma(g, v, c));
      v = add(scale(v, fc), bcast(scale(mean_gray, 1.0 - fc), {h * w, c}));
      // Saturation blends against per-pixel gray.
      Var gray3 = matmul(luma(g, v, c), g.constant(Tensor::full({1, c}, 1.0)));
      v = add(scale(v, fs), scale(gray3, 1.0 - fs));
    }

    if (spec.perspective && rng.bernoulli(spec.apply_probability)) {
      v = csr_apply(v, perspective_map(h, w, spec.perspective_scale, rng));
    }

    if (spec.blur && rng.bernoulli(spec.apply_probability)) {
      double sigma = rng.uniform(spec.blur_sigma_lo, spec.blur_sigma_hi);
      v = csr_apply(v, blur_map(h, w, spec.blur_kernel, sigma));
    }

    if (resize) v = csr_apply(v, resize);
    v = clamp(v, 0.0, 1.0);
    parts.push_back(v);
  }
  return reshape(concat_rows(parts), {batch, oh, ow, c});
}

Tensor make_batch(const Tensor& x_hat, int batch, const AugmentSpec& spec,
                  uint64_t seed) {
  if (x_hat.rank() != 3)
    throw std::runtime_error("make_batch: expected (H,W,C)");
  Graph g;
  Var x = g.constant(x_hat.reshaped(
      {1, x_hat.dim(0), x_hat.dim(1), x_hat.dim(2)}));
  return make_batch_var(g, x, batch, spec, seed).val();
}

}  // namespace ginv
