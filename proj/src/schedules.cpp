#include "ginv/schedules.hpp"

#include <cmath>
#include <stdexcept>

#include "ginv/rng.hpp"

namespace ginv {

namespace {
constexpr double kPi = 3.14159265358979323846;

void check_step(const ScheduleSpec& spec, int step) {
  if (spec.total_steps < 1)
    throw std::runtime_error("schedule: total_steps must be >= 1");
  if (spec.start_value < spec.end_value)
    throw std::runtime_error("schedule: start must be >= end");
  if (step < 0 || step >= spec.total_steps)
    throw std::runtime_error("schedule: step out of range");
}

double progress(const ScheduleSpec& spec, int step) {
  return spec.total_steps == 1 ? 0.0
                               : static_cast<double>(step) /
                                     static_cast<double>(spec.total_steps - 1);
}
}  // namespace

double time_envelope(const ScheduleSpec& spec, int step) {
  check_step(spec, step);
  double s = progress(spec, step);
  double ripple = 0.5 + 0.5 * std::cos(2.0 * kPi * spec.ripples * s);
  return spec.end_value + (spec.start_value - spec.end_value) * (1.0 - s) * ripple;
}

int time_at(const ScheduleSpec& spec, int step) {
  if (spec.kind != ScheduleSpec::Kind::time_cosine_linear)
    throw std::runtime_error("time_at: wrong schedule kind");
  double base = time_envelope(spec, step);
  double u = 0.0;
  if (spec.noise_halfwidth > 0.0) {
    Rng r = Rng::derive(spec.seed, static_cast<uint64_t>(step));
    u = r.uniform(-spec.noise_halfwidth, spec.noise_halfwidth);
  }
  double tau = std::nearbyint(base + u);  // round half to even
  tau = std::min(spec.start_value, std::max(spec.end_value, tau));
  return static_cast<int>(tau);
}

double zeta_at(const ScheduleSpec& spec, int step) {
  if (spec.kind != ScheduleSpec::Kind::zeta_cosine_ramp)
    throw std::runtime_error("zeta_at: wrong schedule kind");
  check_step(spec, step);
  double s = progress(spec, step);
  return spec.end_value +
         (spec.start_value - spec.end_value) * 0.5 * (1.0 + std::cos(kPi * s));
}

}  // namespace ginv
