#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

// The adversary's observation: per-layer averaged gradients plus enough
// metadata to bind them to a model snapshot. Gradient values are rounded
// through float32 at capture time (the wire precision of the container
// format), so in-memory captures and files agree exactly.
struct GradientCapture {
  std::vector<std::pair<std::string, Tensor>> entries;
  uint64_t model_ref = 0;  // content hash of the victim weights
  int batch_size = 0;
  std::optional<std::map<int, int>> label_multiset_hint;  // class -> count
  std::map<std::string, std::string> metadata;

  int layer_count() const { return static_cast<int>(entries.size()); }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }

  bool same_manifest(const GradientCapture& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != o.entries[i].first) return false;
      if (entries[i].second.shape != o.entries[i].second.shape) return false;
    }
    return true;
  }
};

inline double f32_round(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void f32_round_tensor(Tensor& t) {
  for (auto& v : t.data) v = f32_round(v);
}

}  // namespace ginv
