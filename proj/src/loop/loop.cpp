#include "mrdrive/loop/loop.hpp"

#include <cmath>
#include <string>

namespace mrdrive::loop {

void LoopConfig::validate() const {
  if (tick_hz <= 0.0 || sensor_hz <= 0.0) {
    throw std::invalid_argument("loop config: rates must be positive");
  }
  const double ratio = tick_hz / sensor_hz;
  if (std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw std::invalid_argument("loop config: tick_hz must be a multiple of sensor_hz");
  }
  const double periods = controller_period_ms / tick_ms();
  if (std::abs(periods - std::round(periods)) > 1e-9 || periods < 1.0) {
    throw std::invalid_argument(
        "loop config: controller period must be a multiple of the tick period");
  }
  if (injected_delay_ms < 0.0) {
    throw std::invalid_argument("loop config: injected delay must be >= 0");
  }
}

double loop_period(double controller_period_ms, double exec_time_ms) {
  return std::max(controller_period_ms, exec_time_ms);
}

LoopRegime loop_regime(double controller_period_ms, double exec_time_ms) {
  return exec_time_ms <= controller_period_ms ? LoopRegime::kPeriodBound
                                              : LoopRegime::kComputeBound;
}

double cycle_delay(double controller_period_ms, double exec_time_ms,
                   double injected_delay_ms) {
  if (exec_time_ms <= controller_period_ms) return injected_delay_ms;
  return std::max(injected_delay_ms, exec_time_ms);
}

void CommandLatch::latch(const Command& command, double t_computed_ms,
                         double delay_ms) {
  pending_ = Pending{command, t_computed_ms + delay_ms};
}

Command CommandLatch::applied(double t_ms) {
  if (t_ms < last_query_ms) {
    throw std::invalid_argument("command latch: time regression (" +
                                std::to_string(t_ms) + " after " +
                                std::to_string(last_query_ms) + ")");
  }
  last_query_ms = t_ms;
  if (pending_ && t_ms >= pending_->latch_time_ms) {
    held_ = pending_->command;
    pending_.reset();
  }
  return held_;
}

double stopping_distance(double v, double a_max, double latency_s) {
  if (a_max <= 0.0) {
    throw std::invalid_argument("stopping_distance: a_max must be positive");
  }
  if (v < 0.0 || latency_s < 0.0) {
    throw std::invalid_argument("stopping_distance: v and L must be >= 0");
  }
  return v * v / (2.0 * a_max) + v * latency_s;
}

StaleStateError stale_state_error(double v, double omega, double latency_s) {
  if (latency_s < 0.0) {
    throw std::invalid_argument("stale_state_error: latency must be >= 0");
  }
  return {v * latency_s, omega * latency_s};
}

}  // namespace mrdrive::loop
