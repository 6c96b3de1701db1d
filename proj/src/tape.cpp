#include "ginv/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace ginv::tape {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<const RowMat>;
using MapMatMut = Eigen::Map<RowMat>;

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("tape: " + msg);
}

void require(bool ok, const char* msg) {
  if (!ok) fail(msg);
}

int rows2d(const Tensor& t) {
  require(t.rank() == 2, "expected 2-D tensor");
  return t.dim(0);
}

}  // namespace

const Tensor& Var::val() const { return g->node(id).val; }

std::shared_ptr<Csr> Csr::build(int rows, int cols,
                                const std::vector<int>& indptr,
                                const std::vector<int>& indices,
                                const std::vector<double>& values) {
  struct CsrPair {
    Csr fwd, bwd;
  };
  auto pair = std::make_shared<CsrPair>();
  Csr& m = pair->fwd;
  m.rows = rows;
  m.cols = cols;
  m.indptr = indptr;
  m.indices = indices;
  m.values = values;

  // Build the transpose eagerly (counting sort by column).
  Csr& t = pair->bwd;
  t.rows = cols;
  t.cols = rows;
  t.indptr.assign(static_cast<size_t>(cols) + 1, 0);
  for (int e : indices) t.indptr[static_cast<size_t>(e) + 1]++;
  for (int i = 0; i < cols; ++i) t.indptr[i + 1] += t.indptr[i];
  t.indices.resize(indices.size());
  t.values.resize(values.size());
  std::vector<int> cursor(t.indptr.begin(), t.indptr.end() - 1);
  for (int r = 0; r < rows; ++r) {
    for (int e = indptr[r]; e < indptr[r + 1]; ++e) {
      int c = indices[static_cast<size_t>(e)];
      int pos = cursor[static_cast<size_t>(c)]++;
      t.indices[static_cast<size_t>(pos)] = r;
      t.values[static_cast<size_t>(pos)] = values[static_cast<size_t>(e)];
    }
  }
  m.twin = &t;
  t.twin = &m;
  return std::shared_ptr<Csr>(pair, &pair->fwd);
}

std::shared_ptr<ConvMap> ConvMap::make(int batch, int in_h, int in_w,
                                       int channels, int k_h, int k_w,
                                       int stride, int pad) {
  auto m = std::make_shared<ConvMap>();
  m->batch = batch;
  m->in_h = in_h;
  m->in_w = in_w;
  m->channels = channels;
  m->k_h = k_h;
  m->k_w = k_w;
  m->stride_h = stride;
  m->stride_w = stride;
  m->pad_h = pad;
  m->pad_w = pad;
  m->out_h = (in_h + 2 * pad - k_h) / stride + 1;
  m->out_w = (in_w + 2 * pad - k_w) / stride + 1;
  require(m->out_h > 0 && m->out_w > 0, "conv output collapsed to zero");
  return m;
}

Var Graph::leaf(Tensor v) {
  Node n;
  n.op = Op::Leaf;
  n.val = std::move(v);
  n.needs_grad = true;
  return {this, emit(std::move(n))};
}

Var Graph::constant(Tensor v) {
  Node n;
  n.op = Op::Const;
  n.val = std::move(v);
  n.needs_grad = false;
  return {this, emit(std::move(n))};
}

NodeId Graph::emit(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

size_t Graph::tensor_bytes() const {
  size_t total = 0;
  for (const auto& n : nodes_) total += n.val.data.size() * sizeof(double);
  return total;
}

namespace {

Var unary(Op op, Var a, Tensor out) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.val = std::move(out);
  n.needs_grad = a.g->node(a.id).needs_grad;
  return {a.g, a.g->emit(std::move(n))};
}

Var binary(Op op, Var a, Var b, Tensor out) {
  require(a.g == b.g, "operands from different graphs");
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.val = std::move(out);
  n.needs_grad =
      a.g->node(a.id).needs_grad || b.g->node(b.id).needs_grad;
  return {a.g, a.g->emit(std::move(n))};
}

}  // namespace

Var add(Var a, Var b) {
  require(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor out = a.val();
  out += b.val();
  return binary(Op::Add, a, b, std::move(out));
}

Var sub(Var a, Var b) {
  require(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tensor out = a.val();
  out -= b.val();
  return binary(Op::Sub, a, b, std::move(out));
}

Var mul(Var a, Var b) {
  require(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor out = a.val();
  const auto& bd = b.val().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
  return binary(Op::Mul, a, b, std::move(out));
}

Var scale(Var a, double c) {
  Tensor out = a.val().scaled(c);
  Var v = unary(Op::Scale, a, std::move(out));
  v.g->node(v.id).c0 = c;
  return v;
}

Var add_scalar(Var a, double c) {
  Tensor out = a.val();
  for (auto& x : out.data) x += c;
  Var v = unary(Op::AddScalar, a, std::move(out));
  v.g->node(v.id).c0 = c;
  return v;
}

Var matmul(Var a, Var b) {
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require(ta.rank() == 2 && tb.rank() == 2, "matmul: need 2-D operands");
  require(ta.dim(1) == tb.dim(0), "matmul: inner dimension mismatch");
  int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  MapMat A(ta.data.data(), m, k);
  MapMat B(tb.data.data(), k, n);
  MapMatMut C(out.data.data(), m, n);
  C.noalias() = A * B;
  return binary(Op::MatMul, a, b, std::move(out));
}

Var transpose(Var a) {
  const Tensor& t = a.val();
  require(t.rank() == 2, "transpose: need 2-D");
  int m = t.dim(0), n = t.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data[static_cast<size_t>(j) * m + i] =
          t.data[static_cast<size_t>(i) * n + j];
  return unary(Op::Transpose, a, std::move(out));
}

Var reshape(Var a, std::vector<int> shape) {
  require(Tensor::count(shape) == a.numel(), "reshape: element count mismatch");
  Tensor out(shape, a.val().data);
  Var v = unary(Op::Reshape, a, std::move(out));
  v.g->node(v.id).ishape = a.val().shape;
  return v;
}

Var relu(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = x > 0 ? x : 0.0;
  return unary(Op::Relu, a, std::move(out));
}

Var sigmoid(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
  return unary(Op::Sigmoid, a, std::move(out));
}

Var exp(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = std::exp(x);
  return unary(Op::Exp, a, std::move(out));
}

Var log(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = std::log(x);
  return unary(Op::Log, a, std::move(out));
}

Var sqrt(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = std::sqrt(x);
  return unary(Op::Sqrt, a, std::move(out));
}

Var abs(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = std::abs(x);
  return unary(Op::Abs, a, std::move(out));
}

Var reciprocal(Var a) {
  Tensor out = a.val();
  for (auto& x : out.data) x = 1.0 / x;
  return unary(Op::Reciprocal, a, std::move(out));
}

Var clamp(Var a, double lo, double hi) {
  Tensor out = a.val();
  out.clamp_(lo, hi);
  Var v = unary(Op::Clamp, a, std::move(out));
  v.g->node(v.id).c0 = lo;
  v.g->node(v.id).c1 = hi;
  return v;
}

Var sum_all(Var a) {
  Var v = unary(Op::SumAll, a, Tensor::scalar(a.val().sum()));
  v.g->node(v.id).ishape = a.val().shape;
  return v;
}

Var bcast(Var a, std::vector<int> shape) {
  require(a.numel() == 1, "bcast: source must be scalar");
  Tensor out = Tensor::full(shape, a.val().data[0]);
  return unary(Op::Bcast, a, std::move(out));
}

Var im2col(Var x, std::shared_ptr<ConvMap> m) {
  const Tensor& t = x.val();
  require(t.rank() == 4 && t.dim(0) == m->batch && t.dim(1) == m->in_h &&
              t.dim(2) == m->in_w && t.dim(3) == m->channels,
          "im2col: input shape mismatch");
  const int C = m->channels, kh = m->k_h, kw = m->k_w;
  const int rows = m->batch * m->out_h * m->out_w;
  const int cols = kh * kw * C;
  Tensor out({rows, cols});
  const double* src = t.data.data();
  double* dst = out.data.data();
  for (int b = 0; b < m->batch; ++b) {
    for (int oy = 0; oy < m->out_h; ++oy) {
      for (int ox = 0; ox < m->out_w; ++ox) {
        double* row = dst + (static_cast<size_t>(((b * m->out_h) + oy) *
                                                 m->out_w + ox)) * cols;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * m->stride_h - m->pad_h + ky;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * m->stride_w - m->pad_w + kx;
            double* cell = row + static_cast<size_t>(ky * kw + kx) * C;
            if (iy < 0 || iy >= m->in_h || ix < 0 || ix >= m->in_w) {
              std::memset(cell, 0, sizeof(double) * static_cast<size_t>(C));
            } else {
              const double* s =
                  src + (static_cast<size_t>(((b * m->in_h) + iy) * m->in_w +
                                             ix)) * C;
              std::memcpy(cell, s, sizeof(double) * static_cast<size_t>(C));
            }
          }
        }
      }
    }
  }
  Var v = unary(Op::Im2Col, x, std::move(out));
  v.g->node(v.id).conv = std::move(m);
  return v;
}

Var col2im(Var cols, std::shared_ptr<ConvMap> m) {
  const Tensor& t = cols.val();
  const int C = m->channels, kh = m->k_h, kw = m->k_w;
  require(t.rank() == 2 && t.dim(0) == m->batch * m->out_h * m->out_w &&
              t.dim(1) == kh * kw * C,
          "col2im: input shape mismatch");
  Tensor out({m->batch, m->in_h, m->in_w, m->channels});
  const double* src = t.data.data();
  double* dst = out.data.data();
  const int ncols = kh * kw * C;
  for (int b = 0; b < m->batch; ++b) {
    for (int oy = 0; oy < m->out_h; ++oy) {
      for (int ox = 0; ox < m->out_w; ++ox) {
        const double* row = src + (static_cast<size_t>(((b * m->out_h) + oy) *
                                                       m->out_w + ox)) * ncols;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * m->stride_h - m->pad_h + ky;
          if (iy < 0 || iy >= m->in_h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * m->stride_w - m->pad_w + kx;
            if (ix < 0 || ix >= m->in_w) continue;
            const double* cell = row + static_cast<size_t>(ky * kw + kx) * C;
            double* d = dst + (static_cast<size_t>(((b * m->in_h) + iy) *
                                                   m->in_w + ix)) * C;
            for (int c = 0; c < C; ++c) d[c] += cell[c];
          }
        }
      }
    }
  }
  Var v = unary(Op::Col2Im, cols, std::move(out));
  v.g->node(v.id).conv = std::move(m);
  return v;
}

Var avg_pool2(Var x, int b, int h, int w, int c) {
  const Tensor& t = x.val();
  require(t.numel() == static_cast<int64_t>(b) * h * w * c && h % 2 == 0 &&
              w % 2 == 0,
          "avg_pool2: bad geometry");
  int ho = h / 2, wo = w / 2;
  Tensor out({b, ho, wo, c});
  const double* src = t.data.data();
  double* dst = out.data.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const double* r0 =
            src + (static_cast<size_t>(((bi * h) + 2 * oy) * w + 2 * ox)) * c;
        const double* r1 = r0 + static_cast<size_t>(w) * c;
        double* d =
            dst + (static_cast<size_t>(((bi * ho) + oy) * wo + ox)) * c;
        for (int ci = 0; ci < c; ++ci)
          d[ci] = 0.25 * (r0[ci] + r0[c + ci] + r1[ci] + r1[c + ci]);
      }
    }
  }
  Var v = unary(Op::AvgPool2, x, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = b; n.i1 = h; n.i2 = w; n.i3 = c;
  return v;
}

Var upsample2(Var x, int b, int h, int w, int c) {
  const Tensor& t = x.val();
  require(t.numel() == static_cast<int64_t>(b) * h * w * c,
          "upsample2: bad geometry");
  Tensor out({b, 2 * h, 2 * w, c});
  const double* src = t.data.data();
  double* dst = out.data.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < w; ++ix) {
        const double* s =
            src + (static_cast<size_t>(((bi * h) + iy) * w + ix)) * c;
        for (int dy = 0; dy < 2; ++dy) {
          double* d = dst + (static_cast<size_t>(((bi * 2 * h) + 2 * iy + dy) *
                                                 (2 * w) + 2 * ix)) * c;
          for (int ci = 0; ci < c; ++ci) {
            d[ci] = s[ci];
            d[c + ci] = s[ci];
          }
        }
      }
    }
  }
  Var v = unary(Op::Upsample2, x, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = b; n.i1 = h; n.i2 = w; n.i3 = c;
  return v;
}

Var concat_cols(Var a, Var b) {
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
          "concat_cols: row mismatch");
  int m = ta.dim(0), c1 = ta.dim(1), c2 = tb.dim(1);
  Tensor out({m, c1 + c2});
  for (int i = 0; i < m; ++i) {
    std::memcpy(&out.data[static_cast<size_t>(i) * (c1 + c2)],
                &ta.data[static_cast<size_t>(i) * c1],
                sizeof(double) * static_cast<size_t>(c1));
    std::memcpy(&out.data[static_cast<size_t>(i) * (c1 + c2) + c1],
                &tb.data[static_cast<size_t>(i) * c2],
                sizeof(double) * static_cast<size_t>(c2));
  }
  Var v = binary(Op::ConcatCols, a, b, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = c1; n.i1 = c2;
  return v;
}

Var slice_cols(Var a, int c0, int c1) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && c0 >= 0 && c1 <= t.dim(1) && c0 < c1,
          "slice_cols: bad range");
  int m = t.dim(0), ct = t.dim(1), w = c1 - c0;
  Tensor out({m, w});
  for (int i = 0; i < m; ++i)
    std::memcpy(&out.data[static_cast<size_t>(i) * w],
                &t.data[static_cast<size_t>(i) * ct + c0],
                sizeof(double) * static_cast<size_t>(w));
  Var v = unary(Op::SliceCols, a, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = c0; n.i1 = c1; n.i2 = ct;
  return v;
}

Var pad_cols(Var a, int c0, int total) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && c0 >= 0 && c0 + t.dim(1) <= total,
          "pad_cols: bad range");
  int m = t.dim(0), w = t.dim(1);
  Tensor out({m, total});
  for (int i = 0; i < m; ++i)
    std::memcpy(&out.data[static_cast<size_t>(i) * total + c0],
                &t.data[static_cast<size_t>(i) * w],
                sizeof(double) * static_cast<size_t>(w));
  Var v = unary(Op::PadCols, a, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = c0; n.i1 = w; n.i2 = total;
  return v;
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty");
  int cols = parts[0].val().dim(1);
  int rows = 0;
  bool needs = false;
  for (const Var& p : parts) {
    require(p.g == parts[0].g, "concat_rows: graphs differ");
    require(p.val().rank() == 2 && p.val().dim(1) == cols,
            "concat_rows: column mismatch");
    rows += p.val().dim(0);
    needs = needs || p.g->node(p.id).needs_grad;
  }
  Tensor out({rows, cols});
  size_t off = 0;
  for (const Var& p : parts) {
    std::memcpy(out.data.data() + off, p.val().data.data(),
                sizeof(double) * p.val().data.size());
    off += p.val().data.size();
  }
  Node n;
  n.op = Op::ConcatRows;
  for (const Var& p : parts) n.extra.push_back(p.id);
  n.val = std::move(out);
  n.needs_grad = needs;
  Graph* g = parts[0].g;
  return {g, g->emit(std::move(n))};
}

Var slice_rows(Var a, int r0, int r1) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && r0 >= 0 && r1 <= t.dim(0) && r0 < r1,
          "slice_rows: bad range");
  int cols = t.dim(1), h = r1 - r0;
  Tensor out({h, cols});
  std::memcpy(out.data.data(), &t.data[static_cast<size_t>(r0) * cols],
              sizeof(double) * out.data.size());
  Var v = unary(Op::SliceRows, a, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = r0; n.i1 = r1; n.i2 = t.dim(0);
  return v;
}

Var pad_rows(Var a, int r0, int total) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && r0 >= 0 && r0 + t.dim(0) <= total,
          "pad_rows: bad range");
  int cols = t.dim(1), h = t.dim(0);
  Tensor out({total, cols});
  std::memcpy(&out.data[static_cast<size_t>(r0) * cols], t.data.data(),
              sizeof(double) * t.data.size());
  Var v = unary(Op::PadRows, a, std::move(out));
  Node& n = v.g->node(v.id);
  n.i0 = r0; n.i1 = h; n.i2 = total;
  return v;
}

Var pick_index(Var a, std::shared_ptr<std::vector<int>> idx) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && static_cast<int>(idx->size()) == t.dim(0),
          "pick_index: index length mismatch");
  int n = t.dim(0), k = t.dim(1);
  Tensor out({n, 1});
  for (int i = 0; i < n; ++i) {
    int j = (*idx)[static_cast<size_t>(i)];
    require(j >= 0 && j < k, "pick_index: index out of range");
    out.data[static_cast<size_t>(i)] = t.data[static_cast<size_t>(i) * k + j];
  }
  Var v = unary(Op::PickIndex, a, std::move(out));
  Node& nn = v.g->node(v.id);
  nn.idx = std::move(idx);
  nn.i0 = k;
  return v;
}

Var scatter_index(Var a, std::shared_ptr<std::vector<int>> idx, int k) {
  const Tensor& t = a.val();
  require(t.rank() == 2 && t.dim(1) == 1 &&
              static_cast<int>(idx->size()) == t.dim(0),
          "scatter_index: bad operand");
  int n = t.dim(0);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i)
    out.data[static_cast<size_t>(i) * k + (*idx)[static_cast<size_t>(i)]] =
        t.data[static_cast<size_t>(i)];
  Var v = unary(Op::ScatterIndex, a, std::move(out));
  Node& nn = v.g->node(v.id);
  nn.idx = std::move(idx);
  nn.i0 = k;
  return v;
}

Var csr_apply(Var x, std::shared_ptr<Csr> m) {
  const Tensor& t = x.val();
  require(t.rank() == 2 && t.dim(0) == m->cols, "csr_apply: shape mismatch");
  int c = t.dim(1);
  Tensor out({m->rows, c});
  for (int r = 0; r < m->rows; ++r) {
    double* dst = &out.data[static_cast<size_t>(r) * c];
    for (int e = m->indptr[r]; e < m->indptr[r + 1]; ++e) {
      const double w = m->values[static_cast<size_t>(e)];
      const double* src =
          &t.data[static_cast<size_t>(m->indices[static_cast<size_t>(e)]) * c];
      for (int ci = 0; ci < c; ++ci) dst[ci] += w * src[ci];
    }
  }
  Var v = unary(Op::CsrApply, x, std::move(out));
  v.g->node(v.id).csr = std::move(m);
  return v;
}

// ---- composites ------------------------------------------------------------

Var neg(Var a) { return scale(a, -1.0); }
Var square(Var a) { return mul(a, a); }
Var sq_norm(Var a) { return sum_all(mul(a, a)); }
Var dot_all(Var a, Var b) {
  require(a.numel() == b.numel(), "dot_all: size mismatch");
  Var af = reshape(a, {1, static_cast<int>(a.numel())});
  Var bf = reshape(b, {1, static_cast<int>(b.numel())});
  return sum_all(mul(af, bf));
}
Var mean_all(Var a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}
Var add_bias_rows(Var m, Var bias) {
  const Tensor& t = m.val();
  require(t.rank() == 2 && bias.numel() == t.dim(1),
          "add_bias_rows: shape mismatch");
  Var ones = m.g->constant(Tensor::full({t.dim(0), 1}, 1.0));
  return add(m, matmul(ones, reshape(bias, {1, t.dim(1)})));
}
Var mul_scalar_var(Var a, Var s) {
  require(s.numel() == 1, "mul_scalar_var: scale must be scalar");
  return mul(a, bcast(s, a.val().shape));
}

// ---- backward ---------------------------------------------------------------

namespace {

// Constant tensors derived from forward values; zero derivative by design
// (ReLU/clamp masks, abs signs). Correct almost everywhere.
Tensor relu_mask(const Tensor& x) {
  Tensor m = x;
  for (auto& v : m.data) v = v > 0 ? 1.0 : 0.0;
  return m;
}
Tensor clamp_mask(const Tensor& x, double lo, double hi) {
  Tensor m = x;
  for (auto& v : m.data) v = (v >= lo && v <= hi) ? 1.0 : 0.0;
  return m;
}
Tensor sign_of(const Tensor& x) {
  Tensor m = x;
  for (auto& v : m.data) v = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
  return m;
}

struct Accum {
  std::vector<NodeId> grad;  // node id of accumulated gradient, or kNoNode
  Graph* g;

  explicit Accum(Graph* graph, size_t n) : grad(n, kNoNode), g(graph) {}

  void addto(NodeId target, Var contrib) {
    if (grad[static_cast<size_t>(target)] == kNoNode) {
      grad[static_cast<size_t>(target)] = contrib.id;
    } else {
      Var prev{g, grad[static_cast<size_t>(target)]};
      grad[static_cast<size_t>(target)] = add(prev, contrib).id;
    }
  }
};

}  // namespace

std::vector<Var> backward(Var root, const std::vector<Var>& wrt) {
  Graph* g = root.g;
  require(root.numel() == 1, "backward: root must be scalar");
  const size_t snapshot = g->size();

  // Ancestors of root, restricted to nodes that can influence targets.
  std::vector<uint8_t> reach(snapshot, 0);
  {
    std::vector<NodeId> stack{root.id};
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      if (reach[static_cast<size_t>(id)]) continue;
      reach[static_cast<size_t>(id)] = 1;
      const Node& n = g->node(id);
      if (!n.needs_grad) continue;  // constants terminate paths
      if (n.a != kNoNode) stack.push_back(n.a);
      if (n.b != kNoNode) stack.push_back(n.b);
      for (NodeId e : n.extra) stack.push_back(e);
    }
  }

  Accum acc(g, snapshot);
  acc.grad[static_cast<size_t>(root.id)] =
      g->constant(Tensor::scalar(1.0)).id;

  auto var = [g](NodeId id) { return Var{g, id}; };
  auto needs = [g, &reach, snapshot](NodeId id) {
    return id != kNoNode && static_cast<size_t>(id) < snapshot &&
           reach[static_cast<size_t>(id)] && g->node(id).needs_grad;
  };

  // Context copied out of a node before emitting new nodes (emits may
  // reallocate the node vector); excludes the value tensor.
  struct Ctx {
    Op op;
    NodeId a, b;
    std::vector<NodeId> extra;
    double c0, c1;
    int i0, i1, i2, i3;
    std::vector<int> ishape;
    std::shared_ptr<ConvMap> conv;
    std::shared_ptr<Csr> csr;
    std::shared_ptr<std::vector<int>> idx;
  };

  for (NodeId id = static_cast<NodeId>(snapshot) - 1; id >= 0; --id) {
    if (!reach[static_cast<size_t>(id)]) continue;
    NodeId gid = acc.grad[static_cast<size_t>(id)];
    if (gid == kNoNode) continue;
    Var gr = var(gid);
    Ctx n;
    {
      const Node& src = g->node(id);
      n.op = src.op;
      n.a = src.a;
      n.b = src.b;
      n.extra = src.extra;
      n.c0 = src.c0;
      n.c1 = src.c1;
      n.i0 = src.i0;
      n.i1 = src.i1;
      n.i2 = src.i2;
      n.i3 = src.i3;
      n.ishape = src.ishape;
      n.conv = src.conv;
      n.csr = src.csr;
      n.idx = src.idx;
    }
    switch (n.op) {
      case Op::Const:
      case Op::Leaf:
        break;
      case Op::Add:
        if (needs(n.a)) acc.addto(n.a, gr);
        if (needs(n.b)) acc.addto(n.b, gr);
        break;
      case Op::Sub:
        if (needs(n.a)) acc.addto(n.a, gr);
        if (needs(n.b)) acc.addto(n.b, neg(gr));
        break;
      case Op::Mul:
        if (needs(n.a)) acc.addto(n.a, mul(gr, var(n.b)));
        if (needs(n.b)) acc.addto(n.b, mul(gr, var(n.a)));
        break;
      case Op::Scale:
        if (needs(n.a)) acc.addto(n.a, scale(gr, n.c0));
        break;
      case Op::AddScalar:
        if (needs(n.a)) acc.addto(n.a, gr);
        break;
      case Op::MatMul:
        if (needs(n.a)) acc.addto(n.a, matmul(gr, transpose(var(n.b))));
        if (needs(n.b)) acc.addto(n.b, matmul(transpose(var(n.a)), gr));
        break;
      case Op::Transpose:
        if (needs(n.a)) acc.addto(n.a, transpose(gr));
        break;
      case Op::Reshape:
        if (needs(n.a)) acc.addto(n.a, reshape(gr, n.ishape));
        break;
      case Op::Relu:
        if (needs(n.a))
          acc.addto(n.a, mul(gr, g->constant(relu_mask(g->node(n.a).val))));
        break;
      case Op::Sigmoid:
        if (needs(n.a)) {
          Var y = var(id);
          Var one_minus = add_scalar(neg(y), 1.0);
          acc.addto(n.a, mul(gr, mul(y, one_minus)));
        }
        break;
      case Op::Exp:
        if (needs(n.a)) acc.addto(n.a, mul(gr, var(id)));
        break;
      case Op::Log:
        if (needs(n.a)) acc.addto(n.a, mul(gr, reciprocal(var(n.a))));
        break;
      case Op::Sqrt:
        if (needs(n.a))
          acc.addto(n.a, mul(gr, scale(reciprocal(var(id)), 0.5)));
        break;
      case Op::Abs:
        if (needs(n.a))
          acc.addto(n.a, mul(gr, g->constant(sign_of(g->node(n.a).val))));
        break;
      case Op::Reciprocal:
        if (needs(n.a)) {
          Var y = var(id);
          acc.addto(n.a, neg(mul(gr, mul(y, y))));
        }
        break;
      case Op::Clamp:
        if (needs(n.a))
          acc.addto(n.a, mul(gr, g->constant(clamp_mask(g->node(n.a).val,
                                                        n.c0, n.c1))));
        break;
      case Op::SumAll:
        if (needs(n.a)) acc.addto(n.a, bcast(gr, n.ishape));
        break;
      case Op::Bcast:
        if (needs(n.a)) acc.addto(n.a, sum_all(gr));
        break;
      case Op::Im2Col:
        if (needs(n.a)) acc.addto(n.a, col2im(gr, n.conv));
        break;
      case Op::Col2Im:
        if (needs(n.a)) acc.addto(n.a, im2col(gr, n.conv));
        break;
      case Op::AvgPool2:
        if (needs(n.a))
          acc.addto(n.a, scale(upsample2(gr, n.i0, n.i1 / 2, n.i2 / 2, n.i3),
                               0.25));
        break;
      case Op::Upsample2:
        if (needs(n.a))
          acc.addto(n.a, scale(avg_pool2(gr, n.i0, 2 * n.i1, 2 * n.i2, n.i3),
                               4.0));
        break;
      case Op::ConcatCols:
        if (needs(n.a)) acc.addto(n.a, slice_cols(gr, 0, n.i0));
        if (needs(n.b)) acc.addto(n.b, slice_cols(gr, n.i0, n.i0 + n.i1));
        break;
      case Op::SliceCols:
        if (needs(n.a)) acc.addto(n.a, pad_cols(gr, n.i0, n.i2));
        break;
      case Op::PadCols:
        if (needs(n.a)) acc.addto(n.a, slice_cols(gr, n.i0, n.i0 + n.i1));
        break;
      case Op::ConcatRows: {
        int r0 = 0;
        for (NodeId part : n.extra) {
          int h = g->node(part).val.dim(0);
          if (needs(part)) acc.addto(part, slice_rows(gr, r0, r0 + h));
          r0 += h;
        }
        break;
      }
      case Op::SliceRows:
        if (needs(n.a)) acc.addto(n.a, pad_rows(gr, n.i0, n.i2));
        break;
      case Op::PadRows:
        if (needs(n.a)) acc.addto(n.a, slice_rows(gr, n.i0, n.i0 + n.i1));
        break;
      case Op::PickIndex:
        if (needs(n.a)) acc.addto(n.a, scatter_index(gr, n.idx, n.i0));
        break;
      case Op::ScatterIndex:
        if (needs(n.a)) acc.addto(n.a, pick_index(gr, n.idx));
        break;
      case Op::CsrApply:
        if (needs(n.a)) acc.addto(n.a, csr_apply(gr, transposed_of(n.csr)));
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    NodeId gid = (static_cast<size_t>(w.id) < snapshot)
                     ? acc.grad[static_cast<size_t>(w.id)]
                     : kNoNode;
    if (gid == kNoNode) {
      out.push_back(g->constant(Tensor::zeros(w.val().shape)));
    } else {
      out.push_back(var(gid));
    }
  }
  return out;
}

}  // namespace ginv::tape
