#include "ginv/labels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ginv {

std::vector<int> LabelEstimate::expand_sorted() const {
  std::vector<int> out;
  for (const auto& [cls, count] : multiset)
    for (int i = 0; i < count; ++i) out.push_back(cls);
  return out;
}

LabelEstimate provided_labels(const GradientCapture& capture) {
  if (!capture.label_multiset_hint)
    throw std::runtime_error("provided_labels: capture has no label hint");
  LabelEstimate e;
  e.method = LabelEstimate::Method::provided;
  e.multiset = *capture.label_multiset_hint;
  for (const auto& [cls, count] : e.multiset)
    e.confidence.push_back(static_cast<double>(count));
  return e;
}

LabelEstimate recover_labels(const GradientCapture& capture,
                             const VictimModel& model) {
  if (capture.batch_size < 1)
    throw std::runtime_error("recover_labels: batch_size missing");
  const std::string wname = model.last_layer_name() + ".weight";
  const std::string bname = model.last_layer_name() + ".bias";
  const Tensor* wgrad = capture.find(wname);
  if (!wgrad)
    throw std::runtime_error("recover_labels: last layer " + wname +
                             " not in capture");
  int k = model.num_classes();
  if (wgrad->rank() != 2 || wgrad->dim(1) != k)
    throw std::runtime_error("recover_labels: unexpected last-layer shape");
  int in_dim = wgrad->dim(0);
  int batch = capture.batch_size;

  LabelEstimate e;
  e.method = LabelEstimate::Method::analytic;
  e.confidence.assign(static_cast<size_t>(k), 0.0);

  // Per-class column sums of the weight gradient:
  //   (1/B) sum_i (softmax_c(i) - [c == y_i]) * sum(features_i).
  std::vector<double> col_sum(static_cast<size_t>(k), 0.0);
  for (int r = 0; r < in_dim; ++r)
    for (int c = 0; c < k; ++c)
      col_sum[static_cast<size_t>(c)] +=
          wgrad->data[static_cast<size_t>(r) * k + c];

  if (batch == 1) {
    // The unique negative column sum marks the true class; ties break
    // toward the lower index.
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (col_sum[static_cast<size_t>(c)] < col_sum[static_cast<size_t>(best)])
        best = c;
    e.multiset[best] = 1;
    for (int c = 0; c < k; ++c)
      e.confidence[static_cast<size_t>(c)] = -col_sum[static_cast<size_t>(c)];
    return e;
  }

  const Tensor* bgrad = capture.find(bname);
  if (!bgrad)
    throw std::runtime_error("recover_labels: batch recovery needs the bias "
                             "gradient of " + bname);

  // Mean softmax at the captured weights, estimated on seeded probes.
  const int probes = 64;
  Rng rng = Rng::derive(model.weights_hash(), 0xB1A5ull);
  Tensor probe_images = Tensor::rand_uniform(
      {probes, model.spec().height, model.spec().width, model.spec().channels},
      rng, 0.0, 1.0);
  Tensor probs = nn::softmax_rows(model.logits(probe_images));
  std::vector<double> mean_p(static_cast<size_t>(k), 0.0);
  for (int i = 0; i < probes; ++i)
    for (int c = 0; c < k; ++c)
      mean_p[static_cast<size_t>(c)] +=
          probs.data[static_cast<size_t>(i) * k + c] / probes;

  // counts ~= B * (mean softmax - bias gradient), then round to a valid
  // multiset by largest remainder.
  std::vector<double> frac(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) {
    double f = batch * (mean_p[static_cast<size_t>(c)] -
                        bgrad->data[static_cast<size_t>(c)]);
    frac[static_cast<size_t>(c)] = std::clamp(f, 0.0, static_cast<double>(batch));
    e.confidence[static_cast<size_t>(c)] = frac[static_cast<size_t>(c)];
  }
  double fsum = std::accumulate(frac.begin(), frac.end(), 0.0);
  if (fsum <= 0) {
    // Degenerate estimate: spread uniformly.
    for (int c = 0; c < k; ++c) frac[static_cast<size_t>(c)] = 1.0;
    fsum = k;
  }
  for (auto& f : frac) f *= batch / fsum;

  std::vector<int> counts(static_cast<size_t>(k));
  int assigned = 0;
  for (int c = 0; c < k; ++c) {
    counts[static_cast<size_t>(c)] = static_cast<int>(std::floor(frac[static_cast<size_t>(c)]));
    assigned += counts[static_cast<size_t>(c)];
  }
  std::vector<int> order(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double ra = frac[static_cast<size_t>(a)] - std::floor(frac[static_cast<size_t>(a)]);
    double rb = frac[static_cast<size_t>(b)] - std::floor(frac[static_cast<size_t>(b)]);
    if (ra != rb) return ra > rb;
    return a < b;  // ties toward the lower class index
  });
  for (int i = 0; assigned < batch; ++i) {
    counts[static_cast<size_t>(order[static_cast<size_t>(i % k)])]++;
    ++assigned;
  }

  for (int c = 0; c < k; ++c)
    if (counts[static_cast<size_t>(c)] > 0) e.multiset[c] = counts[static_cast<size_t>(c)];
  return e;
}

}  // namespace ginv
