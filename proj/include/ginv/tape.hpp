#pragma once

#include <memory>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv::tape {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

// Sparse matrix in CSR form with an eagerly built transpose so that the
// adjoint of a linear map is available without synchronization. Shared
// between graphs (and threads) read-only. `twin` points at the transpose,
// which lives in the same allocation; take ownership with transposed_of().
struct Csr {
  int rows = 0, cols = 0;
  std::vector<int> indptr;   // rows + 1
  std::vector<int> indices;  // column index per entry
  std::vector<double> values;
  Csr* twin = nullptr;

  static std::shared_ptr<Csr> build(int rows, int cols,
                                    const std::vector<int>& indptr,
                                    const std::vector<int>& indices,
                                    const std::vector<double>& values);
};

inline std::shared_ptr<Csr> transposed_of(const std::shared_ptr<Csr>& m) {
  return std::shared_ptr<Csr>(m, m->twin);
}

// Geometry of an im2col/col2im pair (NHWC layout).
struct ConvMap {
  int batch, in_h, in_w, channels;
  int k_h, k_w, stride_h, stride_w, pad_h, pad_w;
  int out_h, out_w;

  static std::shared_ptr<ConvMap> make(int batch, int in_h, int in_w,
                                       int channels, int k_h, int k_w,
                                       int stride, int pad);
};

enum class Op : uint8_t {
  Const, Leaf,
  Add, Sub, Mul, Scale, AddScalar,
  MatMul, Transpose, Reshape,
  Relu, Sigmoid, Exp, Log, Sqrt, Abs, Reciprocal, Clamp,
  SumAll, Bcast,
  Im2Col, Col2Im, AvgPool2, Upsample2,
  ConcatCols, SliceCols, PadCols,
  ConcatRows, SliceRows, PadRows,
  PickIndex, ScatterIndex,
  CsrApply,
};

struct Node {
  Op op;
  NodeId a = kNoNode, b = kNoNode;
  std::vector<NodeId> extra;  // n-ary inputs (ConcatRows)
  Tensor val;
  bool needs_grad = false;
  double c0 = 0.0, c1 = 0.0;
  int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
  std::vector<int> ishape;  // input shape context (Reshape/SumAll/pools)
  std::shared_ptr<ConvMap> conv;
  std::shared_ptr<Csr> csr;
  std::shared_ptr<std::vector<int>> idx;
};

class Graph;

struct Var {
  Graph* g = nullptr;
  NodeId id = kNoNode;
  bool valid() const { return g != nullptr && id != kNoNode; }
  const Tensor& val() const;
  const std::vector<int>& shape() const { return val().shape; }
  int64_t numel() const { return val().numel(); }
};

class Graph {
 public:
  Graph() { nodes_.reserve(1024); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
  Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }

  Var leaf(Tensor v);
  Var constant(Tensor v);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  NodeId emit(Node n);

  // Total bytes held by node tensors (structural memory accounting).
  size_t tensor_bytes() const;

 private:
  std::vector<Node> nodes_;
};

// ---- primitive ops -------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var matmul(Var a, Var b);
Var transpose(Var a);                       // 2-D
Var reshape(Var a, std::vector<int> shape);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var reciprocal(Var a);
Var clamp(Var a, double lo, double hi);
Var sum_all(Var a);                         // -> (1)
Var bcast(Var a, std::vector<int> shape);   // (1) -> shape
Var im2col(Var x, std::shared_ptr<ConvMap> m);       // (B,H,W,C) -> (B*Ho*Wo, kh*kw*C)
Var col2im(Var cols, std::shared_ptr<ConvMap> m);    // adjoint of im2col
Var avg_pool2(Var x, int b, int h, int w, int c);    // (b,h,w,c) -> (b,h/2,w/2,c)
Var upsample2(Var x, int b, int h, int w, int c);    // nearest, (b,h,w,c) -> (b,2h,2w,c)
Var concat_cols(Var a, Var b);              // (m,c1)+(m,c2) -> (m,c1+c2)
Var slice_cols(Var a, int c0, int c1);
Var pad_cols(Var a, int c0, int total);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, int r0, int r1);
Var pad_rows(Var a, int r0, int total);
Var pick_index(Var a, std::shared_ptr<std::vector<int>> idx);  // (n,k) -> (n,1)
Var scatter_index(Var a, std::shared_ptr<std::vector<int>> idx, int k);
Var csr_apply(Var x, std::shared_ptr<Csr> m);  // (m.cols, c) -> (m.rows, c)

// ---- composite helpers ----------------------------------------------------

Var neg(Var a);
Var square(Var a);
Var sq_norm(Var a);                  // sum of squares -> (1)
Var dot_all(Var a, Var b);           // -> (1)
Var mean_all(Var a);
Var add_bias_rows(Var m, Var bias);  // (r,c) + (c)
Var mul_scalar_var(Var a, Var s);    // a * broadcast(s), s is (1)

// Reverse-mode differentiation of a scalar `root` with respect to `wrt`.
// Gradients are emitted onto the same graph, so results are themselves
// differentiable. Unreachable targets yield zero constants.
std::vector<Var> backward(Var root, const std::vector<Var>& wrt);

}  // namespace ginv::tape
