#include "dqnlab/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "dqnlab/errors.hpp"

namespace dqnlab {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "fixed") return ScheduleKind::fixed;
  if (name == "geometric") return ScheduleKind::geometric;
  if (name == "theoretical-oracle" || name == "oracle") return ScheduleKind::theoretical_oracle;
  if (name == "theoretical-estimated" || name == "estimated") {
    return ScheduleKind::theoretical_estimated;
  }
  throw ParameterError("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::fixed: return "fixed";
    case ScheduleKind::geometric: return "geometric";
    case ScheduleKind::theoretical_oracle: return "theoretical-oracle";
    case ScheduleKind::theoretical_estimated: return "theoretical-estimated";
  }
  return "unknown";
}

double EpsilonSchedule::kappa_sqrt_n() const {
  return kappa * std::sqrt(static_cast<double>(buffer_size));
}

void EpsilonSchedule::validate() const {
  if (!(eps_min >= 0.0 && eps_max <= 1.0 && eps_min <= eps_max)) {
    throw ParameterError("schedule: need 0 <= eps_min <= eps_max <= 1");
  }
  switch (kind) {
    case ScheduleKind::fixed:
      if (!(eps0 >= 0.0 && eps0 <= 1.0)) throw ParameterError("schedule: eps0 outside [0, 1]");
      break;
    case ScheduleKind::geometric:
      if (!(eps0 >= 0.0 && eps0 <= 1.0)) throw ParameterError("schedule: eps0 outside [0, 1]");
      if (!(decay > 0.0 && decay <= 1.0)) throw ParameterError("schedule: decay outside (0, 1]");
      break;
    case ScheduleKind::theoretical_oracle:
    case ScheduleKind::theoretical_estimated: {
      if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("schedule: gamma outside (0, 1)");
      const double c_hi = (1.0 - gamma) * (1.0 - gamma);
      if (!(c_eps > 0.0 && c_eps <= c_hi * (1.0 + 1e-12))) {
        throw ParameterError("schedule: c_eps must lie in (0, (1 - gamma)^2]");
      }
      if (!(c_max >= 0.0 && c_max < 1.0)) throw ParameterError("schedule: C_max must lie in [0, 1)");
      if (!(kappa > 0.0)) throw ParameterError("schedule: kappa must be positive");
      if (num_actions == 0 || !(r_max > 0.0)) {
        throw ParameterError("schedule: |A| * R_max must be positive");
      }
      if (!(e0 >= 0.0)) throw ParameterError("schedule: e0 must be nonnegative");
      break;
    }
  }
}

namespace {

double clamp_to(const EpsilonSchedule& s, double raw) {
  if (std::isnan(raw)) raw = s.eps_min;
  return std::clamp(raw, s.eps_min, s.eps_max);
}

double oracle_raw(const EpsilonSchedule& s, double e_t, double c) {
  return s.c_eps * s.kappa_sqrt_n() * e_t /
             ((1.0 - c) * static_cast<double>(s.num_actions) * s.r_max) -
         c / (1.0 - c);
}

}  // namespace

double epsilon_at(const EpsilonSchedule& sched, std::size_t t, std::optional<double> e_t,
                  std::optional<double> c_t) {
  sched.validate();
  const double td = static_cast<double>(t);
  switch (sched.kind) {
    case ScheduleKind::fixed:
      return clamp_to(sched, sched.eps0);
    case ScheduleKind::geometric:
      return clamp_to(sched, sched.eps0 * std::pow(sched.decay, td));
    case ScheduleKind::theoretical_oracle: {
      if (!e_t) throw ParameterError("oracle schedule needs the current e_t");
      const double c = c_t.value_or(sched.c_max);
      if (!(c >= 0.0 && c < 1.0)) throw ParameterError("schedule: C_t must lie in [0, 1)");
      return clamp_to(sched, oracle_raw(sched, *e_t, c));
    }
    case ScheduleKind::theoretical_estimated: {
      const double c = sched.c_max;
      const double rate = sched.gamma + sched.c_eps * (1.0 - sched.gamma);
      const double estimate = std::pow(rate, td) * sched.e0;
      const double floor = sched.c_eps * c / (1.0 - c);
      return clamp_to(sched, std::max(oracle_raw(sched, estimate, c), floor));
    }
  }
  return sched.eps_min;
}

EpsilonBounds epsilon_bounds(double kappa_sqrt_n, double e_t, double gamma, double c_t,
                             std::size_t num_actions, double r_max) {
  if (!(c_t < 1.0)) throw ParameterError("epsilon_bounds: C_t must be below 1");
  const double lower = 1.0 - kappa_sqrt_n * (1.0 - e_t);
  const double upper = (1.0 - gamma) * (1.0 - gamma) * kappa_sqrt_n * e_t /
                           ((1.0 - c_t) * static_cast<double>(num_actions) * r_max) -
                       c_t / (1.0 - c_t);
  EpsilonBounds b;
  b.lower = std::min(1.0, std::max(0.0, lower));
  b.upper = std::min(1.0, std::max(0.0, upper));
  return b;
}

nlohmann::json schedule_to_json(const EpsilonSchedule& s) {
  return {{"kind", to_string(s.kind)}, {"eps0", s.eps0},       {"decay", s.decay},
          {"c_eps", s.c_eps},          {"kappa", s.kappa},     {"c_max", s.c_max},
          {"eps_min", s.eps_min},      {"eps_max", s.eps_max}, {"buffer_size", s.buffer_size},
          {"num_actions", s.num_actions}, {"r_max", s.r_max},  {"e0", s.e0},
          {"gamma", s.gamma}};
}

}  // namespace dqnlab
