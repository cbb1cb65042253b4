#pragma once

#include <string_view>

namespace ddvae {

/// Temperature of the relaxed indicator, restricted to the open interval (0, 1).
class Temperature {
 public:
  explicit Temperature(double tau);
  double value() const { return tau_; }

 private:
  double tau_;
};

/// Smooth surrogate for 1{x > 0}: 1 / (1 + exp(-x/tau) * (1/tau - 1)).
/// Satisfies sigma_tau(0) = tau and converges pointwise to the indicator as
/// tau -> 0.
double sigma_tau(double x, Temperature tau);

/// log(sigma_tau(x)) computed as -softplus(log((1 - tau)/tau) - x/tau);
/// finite for arbitrarily negative x.
double log_sigma_tau(double x, Temperature tau);

/// d/dx log_sigma_tau(x) = (1 - sigma_tau(x)) / tau.
double log_sigma_tau_dx(double x, Temperature tau);

/// Input at which sigma_tau crosses 1/2: tau * log(1/tau - 1).
double delta_half(Temperature tau);

/// Numerically stable log(1 + exp(y)).
double softplus(double y);

enum class ScheduleMode { Linear, LogLinear };

std::string_view to_string(ScheduleMode mode);
ScheduleMode parse_schedule_mode(std::string_view name);

/// Per-epoch annealing plan shared by beta and tau.
struct Schedule {
  double start_value = 0.0;
  double end_value = 0.0;
  int start_epoch = 0;
  int end_epoch = 1;
  ScheduleMode mode = ScheduleMode::Linear;
  bool clamp = true;

  /// Throws DomainError on start_epoch >= end_epoch or nonpositive
  /// endpoints in log-linear mode.
  void validate() const;

  static Schedule constant(double value);
};

/// Value at an epoch: start_value before start_epoch, interpolation in
/// between, end_value after end_epoch when clamped (extrapolation otherwise).
double schedule_value(const Schedule& s, int epoch);

}  // namespace ddvae
