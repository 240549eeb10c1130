#pragma once

#include <map>
#include <optional>
#include <stdexcept>

namespace mrdrive::loop {

// Command applied to the plant. steer in [-1,1], throttle/brake in [0,1].
struct Command {
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

// Safe default before the first latch: full brake, zero steer.
inline Command initial_command() { return Command{0.0, 0.0, 1.0}; }

// Timing of the sensing->compute->actuate loop. All times in milliseconds.
struct LoopConfig {
  double tick_hz = 40.0;
  double sensor_hz = 20.0;
  double controller_period_ms = 50.0;  // T_c
  double injected_delay_ms = 0.0;      // D, zero-order-hold injected delay
  std::map<double, double> exec_time_ms;  // modeled L_exec per scale

  double tick_ms() const { return 1000.0 / tick_hz; }
  double sensor_period_ms() const { return 1000.0 / sensor_hz; }
  void validate() const;
};

enum class LoopRegime { kPeriodBound, kComputeBound };

// Achieved loop period max(T_c, L_exec).
double loop_period(double controller_period_ms, double exec_time_ms);

// Period-bound when L_exec <= T_c (measured sensing-to-actuation delay is
// about D), compute-bound otherwise (about L_exec).
LoopRegime loop_regime(double controller_period_ms, double exec_time_ms);

// The sensing-to-actuation delay the loop realizes for one cycle.
double cycle_delay(double controller_period_ms, double exec_time_ms,
                   double injected_delay_ms);

// Zero-order hold: the previously applied command is held until a new
// command's latch time passes; a newer pending command replaces an unlatched
// older one. applied() must be called with non-decreasing times.
class CommandLatch {
 public:
  explicit CommandLatch(Command initial = initial_command())
      : held_(initial) {}

  // Command computed at t_computed_ms becomes applicable at
  // t_computed_ms + delay_ms.
  void latch(const Command& command, double t_computed_ms, double delay_ms);

  // The command in force at time t_ms.
  Command applied(double t_ms);

  bool has_pending() const { return pending_.has_value(); }

 private:
  Command held_;
  struct Pending {
    Command command;
    double latch_time_ms;
  };
  std::optional<Pending> pending_;
  double last_query_ms = -1e300;
};

// d_stop = v^2 / (2 a_max) + v L. Speeds in m/s, a_max in m/s^2, L in
// seconds, result in meters.
double stopping_distance(double v, double a_max, double latency_s);

// Stale-state displacement (delta_s, delta_theta) = (v L, omega L).
struct StaleStateError {
  double delta_s = 0.0;
  double delta_theta = 0.0;
};
StaleStateError stale_state_error(double v, double omega, double latency_s);

}  // namespace mrdrive::loop
