#include "mrdrive/switcher/switcher.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace mrdrive::switcher {

void SwitchPolicy::validate() const {
  if (!(enter_radius_m < exit_radius_m)) {
    throw std::invalid_argument(
        "switch policy: enter radius must be < exit radius (hysteresis)");
  }
  if (default_scale <= 0.0 || boost_scale <= 0.0) {
    throw std::invalid_argument("switch policy: scales must be positive");
  }
}

void LatencyEnvelope::validate() const {
  if (!(low_ms <= high_ms)) {
    throw std::invalid_argument("latency envelope: L_low must be <= L_high");
  }
}

ScaleSwitcher::ScaleSwitcher(const SwitchPolicy& policy)
    : policy_(policy), current_(policy.default_scale) {
  policy_.validate();
}

double ScaleSwitcher::select_scale(const Point& ego,
                                   const std::vector<Point>& lights) {
  double nearest = std::numeric_limits<double>::infinity();
  for (const auto& l : lights) {
    const double d = std::hypot(l.x - ego.x, l.y - ego.y);
    nearest = std::min(nearest, d);
  }
  if (current_ == policy_.default_scale) {
    if (nearest <= policy_.enter_radius_m) {
      current_ = policy_.boost_scale;
      ++switches_;
    }
  } else {
    if (nearest >= policy_.exit_radius_m) {
      current_ = policy_.default_scale;
      ++switches_;
    }
  }
  return current_;
}

CycleTiming apply_envelope(const LatencyEnvelope& envelope,
                           const SwitchPolicy& policy, double scale) {
  envelope.validate();
  if (scale == policy.default_scale) return {envelope.low_ms, envelope.low_ms};
  if (scale == policy.boost_scale) return {envelope.high_ms, envelope.high_ms};
  throw std::invalid_argument("apply_envelope: scale " + std::to_string(scale) +
                              " is not part of the policy pair");
}

}  // namespace mrdrive::switcher
