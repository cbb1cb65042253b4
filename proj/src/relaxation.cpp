#include "ddvae/relaxation.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "ddvae/errors.hpp"

namespace ddvae {

Temperature::Temperature(double tau) : tau_(tau) {
  if (!(tau > 0.0 && tau < 1.0)) {
    throw DomainError("temperature must lie in (0, 1), got " + std::to_string(tau));
  }
}

double softplus(double y) {
  if (y > 0.0) return y + std::log1p(std::exp(-y));
  return std::log1p(std::exp(y));
}

double sigma_tau(double x, Temperature tau) {
  const double t = tau.value();
  return 1.0 / (1.0 + std::exp(-x / t) * (1.0 / t - 1.0));
}

double log_sigma_tau(double x, Temperature tau) {
  const double t = tau.value();
  return -softplus(std::log((1.0 - t) / t) - x / t);
}

double log_sigma_tau_dx(double x, Temperature tau) {
  const double t = tau.value();
  // 1 - sigma_tau(x) = logistic(log((1 - t)/t) - x/t)
  const double y = std::log((1.0 - t) / t) - x / t;
  const double complement = y >= 0.0 ? 1.0 / (1.0 + std::exp(-y)) : std::exp(y) / (1.0 + std::exp(y));
  return complement / t;
}

double delta_half(Temperature tau) {
  const double t = tau.value();
  return t * std::log(1.0 / t - 1.0);
}

std::string_view to_string(ScheduleMode mode) {
  return mode == ScheduleMode::Linear ? "linear" : "log_linear";
}

ScheduleMode parse_schedule_mode(std::string_view name) {
  if (name == "linear") return ScheduleMode::Linear;
  if (name == "log_linear") return ScheduleMode::LogLinear;
  throw std::invalid_argument("unknown schedule mode '" + std::string(name) + "'");
}

void Schedule::validate() const {
  if (start_epoch >= end_epoch) {
    throw DomainError("schedule requires start_epoch < end_epoch");
  }
  if (mode == ScheduleMode::LogLinear && !(start_value > 0.0 && end_value > 0.0)) {
    throw DomainError("log-linear schedule requires positive endpoints");
  }
}

Schedule Schedule::constant(double value) {
  return Schedule{value, value, 0, 1, ScheduleMode::Linear, true};
}

double schedule_value(const Schedule& s, int epoch) {
  s.validate();
  if (epoch <= s.start_epoch) return s.start_value;
  if (epoch >= s.end_epoch && s.clamp) return s.end_value;
  const double frac =
      static_cast<double>(epoch - s.start_epoch) / static_cast<double>(s.end_epoch - s.start_epoch);
  if (s.mode == ScheduleMode::Linear) {
    return s.start_value + frac * (s.end_value - s.start_value);
  }
  const double lo = std::log(s.start_value);
  const double hi = std::log(s.end_value);
  return std::exp(lo + frac * (hi - lo));
}

}  // namespace ddvae
