#pragma once

#include <string>
#include <vector>

#include "ginv/tape.hpp"
#include "ginv/tensor.hpp"

namespace ginv::nn {

struct ParamEntry {
  std::string name;
  Tensor value;
};

// Ordered set of named parameter tensors. Order defines the gradient
// manifest (shallow to deep) used by captures and layer weighting.
struct ParamStore {
  std::vector<ParamEntry> entries;

  int add(std::string name, Tensor value) {
    entries.push_back({std::move(name), std::move(value)});
    return static_cast<int>(entries.size()) - 1;
  }
  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }
  uint64_t content_hash() const;
  const Tensor& at(int i) const { return entries[static_cast<size_t>(i)].value; }
  Tensor& at(int i) { return entries[static_cast<size_t>(i)].value; }
};

// Leaf (or constant) tape vars for every parameter, in store order.
struct BoundParams {
  std::vector<tape::Var> vars;
  const tape::Var& operator[](int i) const { return vars[static_cast<size_t>(i)]; }
};

BoundParams bind(tape::Graph& g, const ParamStore& store, bool trainable);

// He-style fan-in scaled Gaussian for weights, zero biases.
Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng);

// Convolution stored as (k*k*in_ch, out_ch), matched to im2col row layout.
struct Conv2d {
  int w_idx = -1, b_idx = -1;
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;

  static Conv2d create(ParamStore& store, const std::string& name, int in_ch,
                       int out_ch, int k, int stride, int pad, Rng& rng);
  // x is (B,H,W,in_ch); returns (B,Ho,Wo,out_ch).
  tape::Var apply(tape::Graph& g, const BoundParams& p, tape::Var x, int batch,
                  int h, int w) const;
  int out_dim(int d) const { return (d + 2 * pad - k) / stride + 1; }
};

struct Linear {
  int w_idx = -1, b_idx = -1;
  int in_dim = 0, out_dim = 0;

  static Linear create(ParamStore& store, const std::string& name, int in_dim,
                       int out_dim, Rng& rng);
  tape::Var apply(tape::Graph& g, const BoundParams& p, tape::Var x) const;
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;
  int64_t t = 0;

  void step(ParamStore& store, const std::vector<Tensor>& grads);
};

// Mean cross-entropy of logits (B,K) against integer labels; composed of
// tape primitives so it is differentiable to any order.
tape::Var cross_entropy_mean(tape::Graph& g, tape::Var logits,
                             const std::vector<int>& labels);

tape::Var silu(tape::Var x);

// Softmax of a plain logits tensor (B,K), row-wise.
Tensor softmax_rows(const Tensor& logits);

}  // namespace ginv::nn
