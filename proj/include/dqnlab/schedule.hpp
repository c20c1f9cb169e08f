#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "json.hpp"

namespace dqnlab {

enum class ScheduleKind { fixed, geometric, theoretical_oracle, theoretical_estimated };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Exploration-rate schedule for the outer loop.
///
/// fixed:                 eps_t = eps0
/// geometric:             eps_t = eps0 * decay^t
/// theoretical_oracle:    eps_t = c_eps * kappa * sqrt(N) * e_t / ((1 - C) |A| R_max) - C / (1 - C)
///                        with C = c_max, or a per-iteration C_t when supplied
/// theoretical_estimated: the oracle form with e_t replaced by
///                        (gamma + c_eps (1 - gamma))^t * e0, floored at c_eps * C / (1 - C)
///
/// Every emitted value is clamped to [eps_min, eps_max], itself inside [0, 1].
/// Negative raw values therefore emit eps_min.
struct EpsilonSchedule {
  ScheduleKind kind = ScheduleKind::geometric;
  double eps0 = 1.0;
  double decay = 0.9;
  double eps_min = 0.0;
  double eps_max = 1.0;

  double c_eps = 0.25;
  /// Calibration constant for the hidden Theta(sqrt(N)) factor, used as kappa * sqrt(N).
  /// run() replaces a nonpositive value with 1 / sqrt(d).
  double kappa = 0.0;
  std::size_t buffer_size = 1;
  double c_max = 0.0;
  std::size_t num_actions = 1;
  double r_max = 1.0;
  double e0 = 1.0;
  double gamma = 0.5;

  double kappa_sqrt_n() const;
  /// Throws ParameterError on inadmissible parameters.
  void validate() const;
};

/// Epsilon for outer loop t. The oracle kind requires `e_t`; `c_t` overrides
/// c_max in the oracle form when present.
double epsilon_at(const EpsilonSchedule& sched, std::size_t t, std::optional<double> e_t = {},
                  std::optional<double> c_t = {});

struct EpsilonBounds {
  double lower = 0.0;
  double upper = 1.0;
};

/// Admissible band for eps_t:
///   lower = 1 - kappa sqrt(N) (1 - e_t)
///   upper = (1 - gamma)^2 kappa sqrt(N) e_t / ((1 - C_t) |A| R_max) - C_t / (1 - C_t)
/// returned as (max(0, lower), min(1, max(0, upper))).
EpsilonBounds epsilon_bounds(double kappa_sqrt_n, double e_t, double gamma, double c_t,
                             std::size_t num_actions, double r_max);

nlohmann::json schedule_to_json(const EpsilonSchedule& s);

}  // namespace dqnlab
