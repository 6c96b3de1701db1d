#pragma once

#include <map>
#include <vector>

#include "ginv/capture.hpp"
#include "ginv/victim.hpp"

namespace ginv {

// Label multiset recovered from the last-layer gradient (or passed through
// from a capture hint).
struct LabelEstimate {
  std::map<int, int> multiset;     // class -> count, sums to batch_size
  std::vector<double> confidence;  // per-class scores (fractional counts)
  enum class Method { analytic, provided } method = Method::analytic;

  int total() const {
    int n = 0;
    for (auto& [c, k] : multiset) n += k;
    return n;
  }
  // Batch-length label vector, classes ascending (deterministic order).
  std::vector<int> expand_sorted() const;
};

// Analytic recovery. For B=1 the true class is the unique negative
// column-sum of the last-layer weight gradient (cross-entropy identity
// with nonnegative post-ReLU features). For B>1, class counts come from
// the bias-gradient identity  g_b = mean softmax - counts/B,  with the
// mean softmax estimated on seeded probe inputs, rounded to a valid
// multiset (largest remainder, ties toward the lower class).
LabelEstimate recover_labels(const GradientCapture& capture,
                             const VictimModel& model);

// Bypasses analysis; returns the capture's hint verbatim.
LabelEstimate provided_labels(const GradientCapture& capture);

}  // namespace ginv
