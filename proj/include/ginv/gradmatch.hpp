#pragma once

#include <vector>

#include "ginv/capture.hpp"
#include "ginv/tape.hpp"

namespace ginv {

// Per-layer weights over a gradient manifest, shallow to deep.
struct LayerWeighting {
  std::vector<double> weights;

  static LayerWeighting uniform(int n) {
    LayerWeighting w;
    w.weights.assign(static_cast<size_t>(n), 1.0);
    return w;
  }
  double total() const {
    double s = 0;
    for (double v : weights) s += v;
    return s;
  }
};

// Sliding asymmetric Hamming lobe over normalized layer depth d in [0,1]
// (0 = shallowest). The center starts at the deepest layers and ramps
// linearly to the shallowest across the run.
struct WindowParams {
  double floor = 0.05;
  double left_width = 0.6;
  double right_width = 0.25;
};

struct DistanceResult {
  double value = 0.0;
  bool zero_norm_warning = false;
};

DistanceResult cosine_distance(const GradientCapture& a,
                               const GradientCapture& b,
                               const LayerWeighting& w);
DistanceResult euclidean_distance(const GradientCapture& a,
                                  const GradientCapture& b,
                                  const LayerWeighting& w);

// Anisotropic total variation of an (H,W,C) image: sum of absolute
// horizontal and vertical neighbor differences over all channels.
double tv_prior(const Tensor& image);

struct ClipResult {
  Tensor g;
  bool clipped = false;
  bool degenerate = false;  // ||g_p|| == 0
};

// Algorithm-style norm clipping: scales g_gm so its norm never exceeds
// zeta * ||g_p||; direction is preserved.
ClipResult clip_to_prior(const Tensor& g_gm, const Tensor& g_p, double zeta);

LayerWeighting window_at_step(int step, int total_steps, int layer_count,
                              const WindowParams& params);

// ---- tape-side variants used inside attack optimizations -----------------

// Weighted per-layer cosine distance between synthetic gradient nodes and
// an observed capture (constants). Guarded against zero norms.
tape::Var cosine_distance_var(tape::Graph& g,
                              const std::vector<tape::Var>& synth,
                              const GradientCapture& observed,
                              const LayerWeighting& w);

// Single flattened cosine over all layers (the baseline formulation).
tape::Var global_cosine_distance_var(tape::Graph& g,
                                     const std::vector<tape::Var>& synth,
                                     const GradientCapture& observed);

// Total variation of a flattened (H*W, C) image var.
tape::Var tv_prior_var(tape::Graph& g, tape::Var x2d, int h, int w, int c);

}  // namespace ginv
