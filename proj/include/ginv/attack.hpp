#pragma once

#include <map>
#include <string>
#include <vector>

#include "ginv/augment.hpp"
#include "ginv/capture.hpp"
#include "ginv/diffusion.hpp"
#include "ginv/eval.hpp"
#include "ginv/gradmatch.hpp"
#include "ginv/labels.hpp"
#include "ginv/schedules.hpp"
#include "ginv/victim.hpp"

namespace ginv {

struct AttackConfig {
  enum class Mode { diffula, inverting } mode = Mode::diffula;
  int steps = 1500;
  double lr = 0.05;  // plain gradient-descent step size of the main loop

  ScheduleSpec time_schedule;   // kind = time_cosine_linear
  ScheduleSpec zeta_schedule;   // kind = zeta_cosine_ramp
  bool zeta_index_by_tau = false;

  bool window_enabled = true;
  WindowParams window;

  AugmentSpec augment;
  std::string distance = "cosine";  // "cosine" (per-layer) | "cosine-global"
  int t_star = 0;                   // final denoising start; 0 disables
  uint64_t seed = 0;
  int snapshot_every = 100;
  bool prior_enabled = true;  // ablation: force g_p = 0 and disable clipping
  bool record_updates = false;  // test hook: keep per-step update tensors

  // Baseline (inverting) knobs.
  double lambda_tv = 1e-2;
  double inverting_lr = 0.1;       // Adam step size for the baseline
  bool inverting_lr_decay = true;  // staircase decay at 1/2 and 3/4
  bool inverting_clamp = true;     // project iterates into pixel range
};

struct StepTrace {
  double gm_loss = 0.0;
  double prior_loss = 0.0;
  int tau = 0;
  double zeta = 0.0;
  bool clipped = false;
  double g_gm_norm = 0.0;  // after clipping
  double g_p_norm = 0.0;
};

struct ReconstructionResult {
  AttackConfig::Mode mode = AttackConfig::Mode::diffula;
  Tensor x_hat_raw;            // pre-denoise image in [0,1]
  Tensor x_hat;                // final image in [0,1]
  std::vector<Tensor> images;  // all reconstructions ([0,1]); size B for
                               // the sample-level baseline, 1 otherwise
  std::map<std::string, int> h_c_hat;
  std::map<std::string, std::vector<double>> h_c_posterior;
  bool h_c_random_guess = false;
  std::vector<StepTrace> traces;
  std::vector<std::pair<int, Tensor>> snapshots;  // (step, [0,1] image)
  bool aborted_non_finite = false;

  int64_t optimizer_state_dim = 0;  // dimensionality the optimizer walks
  size_t peak_graph_bytes = 0;      // largest transient tape footprint

  std::vector<Tensor> debug_updates;  // filled when record_updates
};

// User-level attack with the diffusion prior. The adapter may be null;
// attribute inference is then skipped.
ReconstructionResult run_diffula(const GradientCapture& capture,
                                 const VictimModel& model,
                                 const DiffusionModel& prior,
                                 const LabelEstimate& labels,
                                 const SemanticAdapter* adapter,
                                 const AttackConfig& cfg);

// Sample-level baseline: B separate images under a total-variation prior.
ReconstructionResult run_inverting(const GradientCapture& capture,
                                   const VictimModel& model,
                                   const LabelEstimate& labels,
                                   const SemanticAdapter* adapter,
                                   const AttackConfig& cfg);

}  // namespace ginv
