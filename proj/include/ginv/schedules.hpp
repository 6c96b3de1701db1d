#pragma once

#include <cstdint>

namespace ginv {

// Optimization-time schedules driving the attack: the diffusion timestep
// tau_i (noisy cosine-modulated linear anneal) and the clipping scale
// zeta_i (cosine ramp down).
struct ScheduleSpec {
  enum class Kind { time_cosine_linear, zeta_cosine_ramp };
  Kind kind = Kind::time_cosine_linear;
  double start_value = 1000.0;
  double end_value = 500.0;
  int total_steps = 1;
  double noise_halfwidth = 25.0;  // time schedule only
  uint64_t seed = 0;
  int ripples = 3;  // cosine modulation count across the run
};

// Deseeded envelope of the time schedule; hits start at step 0 and end at
// the final step exactly.
double time_envelope(const ScheduleSpec& spec, int step);

// tau_i: envelope plus per-step uniform noise, rounded to nearest even and
// clamped into [end, start].
int time_at(const ScheduleSpec& spec, int step);

// zeta_i: strictly decreasing cosine ramp with exact endpoints.
double zeta_at(const ScheduleSpec& spec, int step);

}  // namespace ginv
