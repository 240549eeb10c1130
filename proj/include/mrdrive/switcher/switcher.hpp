#pragma once

#include <vector>

namespace mrdrive::switcher {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Proximity-triggered scale selection with hysteresis: switch to the boost
// scale within enter_radius of a relevant traffic light, revert only after
// exiting exit_radius. enter_radius < exit_radius so the band holds state.
struct SwitchPolicy {
  double default_scale = 0.75;
  double boost_scale = 1.0;
  double enter_radius_m = 5.0;
  double exit_radius_m = 15.0;

  void validate() const;
};

// Worst-case / default per-cycle latency pair under which adaptive and fixed
// policies are compared. L_low <= L_high.
struct LatencyEnvelope {
  double low_ms = 50.0;   // at the default scale
  double high_ms = 100.0; // at the boost scale

  void validate() const;
};

struct CycleTiming {
  double controller_period_ms = 0.0;
  double exec_time_ms = 0.0;
};

// One instance per episode. Lights passed per query are the relevant ones
// (on the remaining route within lookahead); distance is Euclidean.
class ScaleSwitcher {
 public:
  explicit ScaleSwitcher(const SwitchPolicy& policy);

  double select_scale(const Point& ego, const std::vector<Point>& lights);

  double current_scale() const { return current_; }
  int switch_count() const { return switches_; }

 private:
  SwitchPolicy policy_;
  double current_;
  int switches_ = 0;
};

// Latency-matched timing for the chosen scale: the default scale runs the
// whole cycle at L_low, the boost scale at L_high (T_c = L_exec = L).
CycleTiming apply_envelope(const LatencyEnvelope& envelope,
                           const SwitchPolicy& policy, double scale);

}  // namespace mrdrive::switcher
