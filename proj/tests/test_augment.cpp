#include <doctest.h>

#include "ginv/augment.hpp"
#include "testutil.hpp"

using namespace ginv;

TEST_CASE("disabled pipeline broadcasts identical resized copies") {
  Rng rng(1);
  Tensor x = Tensor::rand_uniform({8, 8, 3}, rng, 0, 1);
  auto spec = AugmentSpec::disabled(4, 4);
  Tensor batch = make_batch(x, 3, spec, 9);
  CHECK(batch.shape == std::vector<int>{3, 4, 4, 3});
  Tensor ref = resize_image(x, 4, 4);
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < ref.numel(); ++j)
      CHECK(batch.data[static_cast<size_t>(i * ref.numel() + j)] ==
            ref.data[static_cast<size_t>(j)]);
}

TEST_CASE("same seed gives bitwise-identical batches") {
  Rng rng(2);
  Tensor x = Tensor::rand_uniform({8, 8, 3}, rng, 0.2, 0.8);
  AugmentSpec spec;
  spec.out_height = 4;
  spec.out_width = 4;
  Tensor a = make_batch(x, 6, spec, 33);
  Tensor b = make_batch(x, 6, spec, 33);
  CHECK(a.data == b.data);
  Tensor c = make_batch(x, 6, spec, 34);
  CHECK(a.data != c.data);
}

TEST_CASE("noise-only pipeline has the identity as its mean") {
  Rng rng(3);
  Tensor x = Tensor::rand_uniform({4, 4, 1}, rng, 0.3, 0.7);
  AugmentSpec spec = AugmentSpec::disabled();
  spec.noise = true;
  spec.noise_sigma = 0.1;
  spec.apply_probability = 1.0;

  const int n = 1000;
  Tensor batch = make_batch(x, n, spec, 5);
  // Per-pixel mean within 3 standard errors (sigma drawn U(0, 0.1) gives
  // an effective per-sample variance of E[sigma^2] = 0.1^2/3).
  double se = std::sqrt(0.01 / 3.0 / n);
  for (int64_t j = 0; j < x.numel(); ++j) {
    double m = 0;
    for (int i = 0; i < n; ++i)
      m += batch.data[static_cast<size_t>(i * x.numel() + j)];
    m /= n;
    CHECK(std::abs(m - x.data[static_cast<size_t>(j)]) <= 3 * se);
  }
}

TEST_CASE("output shape contract across transforms") {
  Rng rng(4);
  Tensor x = Tensor::rand_uniform({16, 16, 3}, rng, 0, 1);
  AugmentSpec spec;
  spec.out_height = 8;
  spec.out_width = 8;
  Tensor batch = make_batch(x, 5, spec, 77);
  CHECK(batch.shape == std::vector<int>{5, 8, 8, 3});
  for (double v : batch.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("differentiability: batch mean gradient matches finite differences") {
  // Interior-valued image keeps the clamp inactive, so the pipeline is
  // smooth at the probe point.
  Rng rng(6);
  Tensor x = Tensor::rand_uniform({4, 4, 3}, rng, 0.3, 0.7);
  AugmentSpec spec;  // all transforms enabled
  spec.noise_sigma = 0.02;
  const uint64_t seed = 11;
  const int batch = 4;

  auto mean_of_batch = [&](const Tensor& img) {
    tape::Graph g;
    tape::Var xv = g.constant(img.reshaped({1, 4, 4, 3}));
    tape::Var b = make_batch_var(g, xv, batch, spec, seed);
    return mean_all(b).val().data[0];
  };

  tape::Graph g;
  tape::Var xv = g.leaf(x.reshaped({1, 4, 4, 3}));
  tape::Var b = make_batch_var(g, xv, batch, spec, seed);
  Tensor analytic = backward(mean_all(b), {xv})[0].val().reshaped({4, 4, 3});
  Tensor fd = testutil::finite_diff(mean_of_batch, x, 1e-5);
  CHECK(testutil::grad_rel_err(analytic, fd) < 1e-3);
}

TEST_CASE("resize: constant images stay constant, mass preserved") {
  Tensor flat = Tensor::full({8, 6, 3}, 0.42);
  Tensor down = resize_image(flat, 4, 3);
  for (double v : down.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
  Tensor up = resize_image(flat, 16, 12);
  for (double v : up.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}
