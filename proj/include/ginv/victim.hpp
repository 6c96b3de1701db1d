#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ginv/capture.hpp"
#include "ginv/nn.hpp"
#include "ginv/tape.hpp"

namespace ginv {

// Architecture spec for the victim classifier. Input shape follows the
// (channels, height, width) convention used in configs; tensors at the
// call boundary are channels-last.
struct ModelSpec {
  std::string arch;  // "small-cnn" | "small-resnet"
  int channels = 3, height = 8, width = 8;
  int num_classes = 2;
  uint64_t seed = 0;
  int base_width = 8;
};

struct LayerInfo {
  std::string name;
  std::vector<int> shape;
  int64_t numel;
};

struct LabeledBatch {
  Tensor images;            // (B,H,W,C), values in [lo,hi]
  std::vector<int> labels;  // length B
  double lo = 0.0, hi = 1.0;

  int size() const { return static_cast<int>(labels.size()); }
};

struct Net;

// Victim classifier f_w. Weights are immutable after construction;
// forward/gradient evaluation is reentrant.
class VictimModel {
 public:
  static VictimModel build(const ModelSpec& spec);

  const ModelSpec& spec() const { return spec_; }
  const nn::ParamStore& params() const { return params_; }
  uint64_t weights_hash() const { return hash_; }
  int num_classes() const { return spec_.num_classes; }

  std::vector<LayerInfo> manifest() const;
  std::string manifest_json() const;

  // Logits graph for an NHWC image batch var; used by gradient paths that
  // need to differentiate through the forward pass.
  tape::Var forward(tape::Graph& g, tape::Var x, const nn::BoundParams& p,
                    int batch) const;
  nn::BoundParams bind(tape::Graph& g, bool trainable) const {
    return nn::bind(g, params_, trainable);
  }

  // Plain forward (no gradients).
  Tensor logits(const Tensor& images) const;

  // Name of the final fully connected layer (for label recovery).
  const std::string& last_layer_name() const { return last_layer_; }

 private:
  ModelSpec spec_;
  nn::ParamStore params_;
  uint64_t hash_ = 0;
  std::string last_layer_;
  std::shared_ptr<const Net> net_;
};

// Mean cross-entropy gradient of the batch with respect to every weight,
// float32-rounded into a capture. Throws on non-finite loss.
GradientCapture batch_gradient(const VictimModel& model,
                               const LabeledBatch& batch);

// Same but also reports the loss value.
GradientCapture batch_gradient(const VictimModel& model,
                               const LabeledBatch& batch, double* loss_out);

}  // namespace ginv
