#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ddvae/errors.hpp"
#include "ddvae/relaxation.hpp"

using namespace ddvae;

TEST_CASE("temperature domain") {
  CHECK_THROWS_AS(Temperature(0.0), DomainError);
  CHECK_THROWS_AS(Temperature(1.0), DomainError);
  CHECK_THROWS_AS(Temperature(-0.5), DomainError);
  CHECK(Temperature(0.25).value() == 0.25);
}

TEST_CASE("sigma_tau anchors") {
  for (double t : {0.5, 0.1, 0.01, 1e-3}) {
    CAPTURE(t);
    const Temperature tau(t);
    CHECK(sigma_tau(0.0, tau) == t);
    CHECK(std::abs(sigma_tau(delta_half(tau), tau) - 0.5) < 1e-12);
    CHECK(delta_half(tau) == doctest::Approx(t * std::log(1.0 / t - 1.0)));
    CHECK(std::exp(log_sigma_tau(0.0, tau)) == doctest::Approx(t).epsilon(1e-14));
  }
  CHECK(delta_half(Temperature(0.5)) == 0.0);
}

TEST_CASE("log sigma_tau is stable far in the negative tail") {
  for (double t : {0.5, 0.1, 0.01, 1e-3}) {
    const Temperature tau(t);
    const double x = -1e3 * t;
    const double v = log_sigma_tau(x, tau);
    CHECK(std::isfinite(v));
    // log sigma_tau(x) -> x/tau - log((1 - tau)/tau) as x/tau -> -inf.
    const double asym = x / t - std::log((1.0 - t) / t);
    CHECK(std::abs(v - asym) <= 1e-9 * std::abs(asym));
  }
  CHECK(std::isfinite(log_sigma_tau(-1e300, Temperature(1e-3))));
}

TEST_CASE("sigma_tau converges to the step indicator") {
  for (double x : {-0.5, -0.05, 0.05, 0.5}) {
    double prev = sigma_tau(x, Temperature(0.1));
    for (double t : {0.05, 0.01, 1e-3, 1e-4}) {
      const double cur = sigma_tau(x, Temperature(t));
      // Monotone in tau once x clears every delta_half on the path.
      if (x >= 0.5) CHECK(cur >= prev);
      if (x < 0) CHECK(cur <= prev);
      prev = cur;
    }
    CHECK(std::abs(prev - (x > 0 ? 1.0 : 0.0)) < 1e-3);
  }
}

TEST_CASE("derivative of log sigma_tau") {
  for (double t : {0.5, 0.1, 0.01}) {
    const Temperature tau(t);
    for (double x : {-0.3, -0.01, 0.0, 0.02, 0.4}) {
      const double h = 1e-7 * t;
      const double fd = (log_sigma_tau(x + h, tau) - log_sigma_tau(x - h, tau)) / (2 * h);
      CHECK(log_sigma_tau_dx(x, tau) == doctest::Approx(fd).epsilon(1e-6));
      CHECK(log_sigma_tau_dx(x, tau) == doctest::Approx((1.0 - sigma_tau(x, tau)) / t).epsilon(1e-12));
    }
  }
}

TEST_CASE("softplus") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(softplus(-30.0) == doctest::Approx(std::exp(-30.0)).epsilon(1e-12));
}

TEST_CASE("schedules") {
  SUBCASE("linear beta") {
    const Schedule s{0.0, 0.1, 0, 100, ScheduleMode::Linear, true};
    CHECK(schedule_value(s, 0) == 0.0);
    CHECK(schedule_value(s, 50) == doctest::Approx(0.05));
    CHECK(schedule_value(s, 100) == doctest::Approx(0.1));
    CHECK(schedule_value(s, 150) == doctest::Approx(0.1));
  }
  SUBCASE("log-linear tau") {
    const Schedule s{0.1, 1e-3, 0, 100, ScheduleMode::LogLinear, true};
    CHECK(schedule_value(s, 0) == doctest::Approx(0.1));
    CHECK(schedule_value(s, 50) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(schedule_value(s, 100) == doctest::Approx(1e-3).epsilon(1e-12));
    for (int e = 0; e < 100; ++e) CHECK(schedule_value(s, e + 1) < schedule_value(s, e));
  }
  SUBCASE("unclamped extrapolation") {
    const Schedule s{0.0, 1.0, 0, 10, ScheduleMode::Linear, false};
    CHECK(schedule_value(s, 20) == doctest::Approx(2.0));
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS((Schedule{0.0, 1.0, 5, 5, ScheduleMode::Linear, true}.validate()), DomainError);
    CHECK_THROWS_AS((Schedule{0.0, 1.0, 0, 5, ScheduleMode::LogLinear, true}.validate()), DomainError);
    CHECK_NOTHROW(Schedule::constant(0.3).validate());
    CHECK(schedule_value(Schedule::constant(0.3), 1000) == 0.3);
  }
  CHECK(parse_schedule_mode("log_linear") == ScheduleMode::LogLinear);
  CHECK_THROWS(parse_schedule_mode("cosine"));
}
