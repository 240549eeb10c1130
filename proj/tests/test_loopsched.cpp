#include <doctest.h>

#include "mrdrive/loop/loop.hpp"

using namespace mrdrive::loop;

TEST_CASE("loop_period is max of controller period and exec time") {
  CHECK(loop_period(50, 30) == doctest::Approx(50));
  CHECK(loop_regime(50, 30) == LoopRegime::kPeriodBound);
  CHECK(loop_period(50, 80) == doctest::Approx(80));
  CHECK(loop_regime(50, 80) == LoopRegime::kComputeBound);
  CHECK(loop_period(100, 100) == doctest::Approx(100));
  CHECK(loop_regime(100, 100) == LoopRegime::kPeriodBound);
}

TEST_CASE("cycle_delay is D when period-bound, exec time when compute-bound") {
  CHECK(cycle_delay(50, 30, 50) == doctest::Approx(50));
  CHECK(cycle_delay(50, 80, 0) == doctest::Approx(80));
  CHECK(cycle_delay(50, 80, 100) == doctest::Approx(100));
  CHECK(cycle_delay(100, 100, 100) == doctest::Approx(100));
}

TEST_CASE("latch with zero delay applies at the next query") {
  CommandLatch latch;
  Command c{0.5, 1.0, 0.0};
  latch.latch(c, 100.0, 0.0);
  CHECK(latch.applied(100.0).steer == doctest::Approx(0.5));
}

TEST_CASE("latch holds the old command for D") {
  CommandLatch latch;
  Command first{0.1, 0.2, 0.0};
  latch.latch(first, 0.0, 0.0);
  (void)latch.applied(0.0);
  Command next{0.9, 0.0, 0.0};
  latch.latch(next, 100.0, 50.0);
  CHECK(latch.applied(140.0).steer == doctest::Approx(0.1));
  CHECK(latch.applied(150.0).steer == doctest::Approx(0.9));
}

TEST_CASE("a newer pending command replaces an unlatched older one") {
  CommandLatch latch;
  Command a{0.2, 0.0, 0.0};
  Command b{0.8, 0.0, 0.0};
  latch.latch(a, 0.0, 50.0);       // would latch at 50
  (void)latch.applied(25.0);       // still before 50
  latch.latch(b, 40.0, 50.0);      // replaces a; latches at 90
  CHECK(latch.applied(50.0).steer == doctest::Approx(0.0));  // a never applied
  CHECK(latch.applied(89.0).steer == doctest::Approx(0.0));
  CHECK(latch.applied(90.0).steer == doctest::Approx(0.8));
}

TEST_CASE("latch rejects time regression") {
  CommandLatch latch;
  (void)latch.applied(10.0);
  CHECK_THROWS_AS(latch.applied(5.0), std::invalid_argument);
}

TEST_CASE("initial held command is full brake") {
  CommandLatch latch;
  Command c = latch.applied(0.0);
  CHECK(c.brake == doctest::Approx(1.0));
  CHECK(c.steer == doctest::Approx(0.0));
  CHECK(c.throttle == doctest::Approx(0.0));
}

TEST_CASE("stopping_distance matches the closed form") {
  CHECK(stopping_distance(10, 5, 0.1) == doctest::Approx(11.0));
  CHECK(stopping_distance(6, 4, 0) == doctest::Approx(36.0 / 8.0));
  CHECK(stopping_distance(0, 3, 0.5) == doctest::Approx(0.0));
  CHECK_THROWS_AS(stopping_distance(5, 0, 0.1), std::invalid_argument);
}

TEST_CASE("stopping_distance is monotone in v and L") {
  double prev = -1.0;
  for (double v = 0.0; v <= 10.0; v += 1.0) {
    const double d = stopping_distance(v, 5.0, 0.2);
    CHECK(d > prev - 1e-12);
    prev = d;
  }
  prev = -1.0;
  for (double l = 0.0; l <= 0.5; l += 0.05) {
    const double d = stopping_distance(8.0, 5.0, l);
    CHECK(d > prev);
    prev = d;
  }
}

TEST_CASE("stale_state_error is (vL, omegaL)") {
  auto e = stale_state_error(8.0, 0.2, 0.15);
  CHECK(e.delta_s == doctest::Approx(1.2));
  CHECK(e.delta_theta == doctest::Approx(0.03));
  auto zero = stale_state_error(8.0, 0.2, 0.0);
  CHECK(zero.delta_s == doctest::Approx(0.0));
  CHECK(zero.delta_theta == doctest::Approx(0.0));
}

TEST_CASE("loop config validation") {
  LoopConfig cfg;
  cfg.validate();
  cfg.controller_period_ms = 60.0;  // not a multiple of 25 ms ticks
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.controller_period_ms = 50.0;
  cfg.injected_delay_ms = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.injected_delay_ms = 0.0;
  cfg.sensor_hz = 30.0;  // 40 not a multiple of 30
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
