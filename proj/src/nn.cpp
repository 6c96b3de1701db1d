#include "ginv/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ginv::nn {

using namespace tape;

uint64_t ParamStore::content_hash() const {
  // FNV-1a over names and raw value bytes; identifies a weight snapshot.
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries) {
    mix(e.name.data(), e.name.size());
    mix(e.value.data.data(), e.value.data.size() * sizeof(double));
  }
  return h;
}

BoundParams bind(Graph& g, const ParamStore& store, bool trainable) {
  BoundParams out;
  out.vars.reserve(store.entries.size());
  for (const auto& e : store.entries)
    out.vars.push_back(trainable ? g.leaf(e.value) : g.constant(e.value));
  return out;
}

Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor w(std::move(shape));
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w.data) v = std * rng.normal();
  return w;
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int in_ch,
                      int out_ch, int k, int stride, int pad, Rng& rng) {
  Conv2d c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.k = k;
  c.stride = stride;
  c.pad = pad;
  int fan_in = k * k * in_ch;
  c.w_idx = store.add(name + ".weight", init_weight({fan_in, out_ch}, fan_in, rng));
  c.b_idx = store.add(name + ".bias", Tensor::zeros({out_ch}));
  return c;
}

Var Conv2d::apply(Graph& g, const BoundParams& p, Var x, int batch, int h,
                  int w) const {
  auto map = ConvMap::make(batch, h, w, in_ch, k, k, stride, pad);
  Var cols = im2col(x, map);
  Var y = add_bias_rows(matmul(cols, p[w_idx]), p[b_idx]);
  return reshape(y, {batch, map->out_h, map->out_w, out_ch});
}

Linear Linear::create(ParamStore& store, const std::string& name, int in_dim,
                      int out_dim, Rng& rng) {
  Linear l;
  l.in_dim = in_dim;
  l.out_dim = out_dim;
  l.w_idx = store.add(name + ".weight", init_weight({in_dim, out_dim}, in_dim, rng));
  l.b_idx = store.add(name + ".bias", Tensor::zeros({out_dim}));
  return l;
}

Var Linear::apply(Graph& g, const BoundParams& p, Var x) const {
  return add_bias_rows(matmul(x, p[w_idx]), p[b_idx]);
}

void Adam::step(ParamStore& store, const std::vector<Tensor>& grads) {
  if (m.empty()) {
    for (const auto& e : store.entries) {
      m.push_back(Tensor::zeros(e.value.shape));
      v.push_back(Tensor::zeros(e.value.shape));
    }
  }
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < store.entries.size(); ++i) {
    Tensor& w = store.entries[i].value;
    const Tensor& gr = grads[i];
    for (size_t j = 0; j < w.data.size(); ++j) {
      double gj = gr.data[j];
      m[i].data[j] = beta1 * m[i].data[j] + (1 - beta1) * gj;
      v[i].data[j] = beta2 * v[i].data[j] + (1 - beta2) * gj * gj;
      double mhat = m[i].data[j] / bc1;
      double vhat = v[i].data[j] / bc2;
      w.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

Var cross_entropy_mean(Graph& g, Var logits, const std::vector<int>& labels) {
  const Tensor& lv = logits.val();
  if (lv.rank() != 2 || lv.dim(0) != static_cast<int>(labels.size()))
    throw std::runtime_error("cross_entropy_mean: logits/labels mismatch");
  int batch = lv.dim(0), k = lv.dim(1);

  // Row max as a constant shift for numerical stability; constant shifts
  // do not change derivatives of log-sum-exp.
  Tensor shift({batch, k});
  for (int i = 0; i < batch; ++i) {
    double mx = lv.data[static_cast<size_t>(i) * k];
    for (int j = 1; j < k; ++j)
      mx = std::max(mx, lv.data[static_cast<size_t>(i) * k + j]);
    for (int j = 0; j < k; ++j) shift.data[static_cast<size_t>(i) * k + j] = mx;
  }
  Var shifted = sub(logits, g.constant(shift));
  Var e = exp(shifted);
  Var ones = g.constant(Tensor::full({k, 1}, 1.0));
  Var lse = log(matmul(e, ones));  // (B,1)
  auto idx = std::make_shared<std::vector<int>>(labels);
  Var picked = pick_index(shifted, idx);  // (B,1)
  Var per_sample = sub(lse, picked);
  return scale(sum_all(per_sample), 1.0 / static_cast<double>(batch));
}

Var silu(Var x) { return mul(x, sigmoid(x)); }

Tensor softmax_rows(const Tensor& logits) {
  int batch = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape);
  for (int i = 0; i < batch; ++i) {
    const double* row = &logits.data[static_cast<size_t>(i) * k];
    double* dst = &out.data[static_cast<size_t>(i) * k];
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int j = 0; j < k; ++j) {
      dst[j] = std::exp(row[j] - mx);
      sum += dst[j];
    }
    for (int j = 0; j < k; ++j) dst[j] /= sum;
  }
  return out;
}

}  // namespace ginv::nn
