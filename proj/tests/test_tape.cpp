#include <doctest.h>

#include "ginv/tape.hpp"
#include "testutil.hpp"

using namespace ginv;
using namespace ginv::tape;
using ginv::testutil::finite_diff;
using ginv::testutil::grad_rel_err;

namespace {

// A scalar function composed of most primitives, used to exercise the
// engine end to end against the finite-difference oracle.
double mixed_fn(const Tensor& x, Tensor* grad_out = nullptr) {
  Graph g;
  Var v = g.leaf(x);                        // (2,8,8,3) image batch
  auto cm = ConvMap::make(2, 8, 8, 3, 3, 3, 1, 1);
  Var cols = im2col(v, cm);                 // (128, 27)
  Rng wrng(42);
  Var w = g.constant(Tensor::rand_uniform({27, 4}, wrng, -0.5, 0.5));
  Var y = relu(matmul(cols, w));            // (128, 4)
  Var img = reshape(y, {2, 8, 8, 4});
  Var pooled = avg_pool2(img, 2, 8, 8, 4);  // (2,4,4,4)
  Var flat = reshape(pooled, {2 * 4 * 4, 4});
  Var s = sigmoid(flat);
  Var total = sum_all(mul(s, s));
  Var lg = log(add_scalar(sq_norm(v), 1.0));
  Var root = add(total, lg);
  if (grad_out) {
    auto grads = backward(root, {v});
    *grad_out = grads[0].val();
  }
  return root.val().data[0];
}

}  // namespace

TEST_CASE("elementwise and matmul gradients match finite differences") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 5}, rng);

  Graph g;
  Var va = g.leaf(a);
  Var vb = g.leaf(b);
  Var root = sum_all(mul(matmul(va, vb), matmul(va, vb)));
  auto grads = backward(root, {va, vb});

  auto fa = [&](const Tensor& t) {
    Graph h;
    Var x = h.leaf(t);
    Var y = h.constant(b);
    return sum_all(mul(matmul(x, y), matmul(x, y))).val().data[0];
  };
  auto fb = [&](const Tensor& t) {
    Graph h;
    Var x = h.constant(a);
    Var y = h.leaf(t);
    return sum_all(mul(matmul(x, y), matmul(x, y))).val().data[0];
  };
  CHECK(grad_rel_err(grads[0].val(), finite_diff(fa, a)) < 1e-7);
  CHECK(grad_rel_err(grads[1].val(), finite_diff(fb, b)) < 1e-7);
}

TEST_CASE("composite graph gradient matches finite differences") {
  Rng rng(11);
  Tensor x = Tensor::randn({2, 8, 8, 3}, rng);
  Tensor analytic;
  mixed_fn(x, &analytic);
  Tensor numeric =
      finite_diff([](const Tensor& t) { return mixed_fn(t); }, x);
  CHECK(grad_rel_err(analytic, numeric) < 1e-6);
}

TEST_CASE("csr apply and its adjoint") {
  // 2x3 map: y0 = 2*x0 + x2 ; y1 = -x1
  auto m = Csr::build(2, 3, {0, 2, 3}, {0, 2, 1}, {2.0, 1.0, -1.0});
  Rng rng(3);
  Tensor x = Tensor::randn({3, 2}, rng);

  Graph g;
  Var vx = g.leaf(x);
  Var y = csr_apply(vx, m);
  CHECK(y.val().dim(0) == 2);
  CHECK(y.val().data[0] ==
        doctest::Approx(2 * x.data[0] + x.data[4]));  // row 0, col 0

  Var root = sq_norm(y);
  auto grads = backward(root, {vx});
  auto f = [&](const Tensor& t) {
    Graph h;
    Var hx = h.leaf(t);
    return sq_norm(csr_apply(hx, m)).val().data[0];
  };
  CHECK(grad_rel_err(grads[0].val(), finite_diff(f, x)) < 1e-7);
}

TEST_CASE("second-order: gradient of a gradient-dependent scalar") {
  // phi(x) = || d/dw [ (w . x)^2 ] ||^2 evaluated at fixed w.
  // d/dw = 2 (w.x) x, so phi = 4 (w.x)^2 ||x||^2, which we can
  // differentiate by hand with respect to x.
  Rng rng(5);
  Tensor x = Tensor::randn({1, 6}, rng);
  Tensor w = Tensor::randn({6, 1}, rng);

  auto phi = [&](const Tensor& xt) {
    Graph g;
    Var vx = g.constant(xt);
    Var vw = g.leaf(w);
    Var y = matmul(vx, vw);
    Var loss = mul(y, y);
    auto gw = backward(sum_all(loss), {vw});
    return sq_norm(gw[0]).val().data[0];
  };

  Graph g;
  Var vx = g.leaf(x);
  Var vw = g.leaf(w);
  Var y = matmul(vx, vw);
  Var loss = mul(y, y);
  auto gw = backward(sum_all(loss), {vw});
  Var phi_node = sq_norm(gw[0]);
  auto gx = backward(phi_node, {vx});

  Tensor numeric = finite_diff(phi, x, 1e-5);
  CHECK(grad_rel_err(gx[0].val(), numeric) < 1e-5);

  // Closed form: phi = 4 (w.x)^2 ||x||^2
  double wx = 0;
  for (int i = 0; i < 6; ++i) wx += w.data[i] * x.data[i];
  double xn = x.dot(x);
  CHECK(phi_node.val().data[0] == doctest::Approx(4 * wx * wx * xn));
}

TEST_CASE("pooling pair are exact adjoints") {
  Rng rng(13);
  Tensor x = Tensor::randn({1, 4, 4, 2}, rng);
  Tensor y = Tensor::randn({1, 2, 2, 2}, rng);
  Graph g;
  // <avg_pool2(x), y> == <x, adjoint(y)>
  Var px = avg_pool2(g.constant(x), 1, 4, 4, 2);
  Var uy = scale(upsample2(g.constant(y), 1, 2, 2, 2), 0.25);
  double lhs = px.val().dot(y);
  double rhs = x.dot(uy.val());
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("concat, slice, pick gradients") {
  Rng rng(17);
  Tensor a = Tensor::randn({3, 2}, rng);
  Tensor b = Tensor::randn({3, 3}, rng);
  auto idx = std::make_shared<std::vector<int>>(std::vector<int>{1, 0, 4});

  auto f = [&](const Tensor& t) {
    Graph h;
    Var va = h.leaf(t);
    Var vb = h.constant(b);
    Var c = concat_cols(va, vb);          // (3,5)
    Var p = pick_index(c, idx);           // (3,1)
    return sq_norm(concat_rows({p, p})).val().data[0];
  };
  Graph g;
  Var va = g.leaf(a);
  Var vb = g.constant(b);
  Var c = concat_cols(va, vb);
  Var p = pick_index(c, idx);
  auto grads = backward(sq_norm(concat_rows({p, p})), {va});
  CHECK(grad_rel_err(grads[0].val(), finite_diff(f, a)) < 1e-7);
}
