#pragma once

// Ground-truth Hamiltonian systems, reference integrators and analytic
// oracles. All fields are autonomous maps PhaseState -> PhaseDeriv.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace hamildis {

struct PhaseState {
  double q = 0.0;
  double p = 0.0;
};

struct PhaseDeriv {
  double dq = 0.0;
  double dp = 0.0;
};

enum class SystemKind { pendulum, spring };

inline const char* system_name(SystemKind k) {
  return k == SystemKind::pendulum ? "pendulum" : "spring";
}

inline SystemKind parse_system(const std::string& s) {
  if (s == "pendulum") return SystemKind::pendulum;
  if (s == "spring") return SystemKind::spring;
  throw std::invalid_argument("unknown system: " + s);
}

struct PendulumParams {
  double m = 1.0;
  double g = 9.8;
  double l = 0.5;
  void validate() const {
    if (!(m > 0.0 && g > 0.0 && l > 0.0)) {
      throw std::invalid_argument("pendulum parameters must be positive");
    }
  }
};

struct SpringParams {
  double k = 0.25;
  double m = 1.0;
  void validate() const {
    if (!(k > 0.0 && m > 0.0)) {
      throw std::invalid_argument("spring parameters must be positive");
    }
  }
};

using SystemParams = std::variant<PendulumParams, SpringParams>;

// H = m g l (1 - cos q) + p^2 / (2 m l^2)
inline double pendulum_hamiltonian(const PhaseState& s, const PendulumParams& pr) {
  return pr.m * pr.g * pr.l * (1.0 - std::cos(s.q)) +
         s.p * s.p / (2.0 * pr.m * pr.l * pr.l);
}

// H = k q^2 / 2 + p^2 / (2 m)
inline double spring_hamiltonian(const PhaseState& s, const SpringParams& pr) {
  return 0.5 * pr.k * s.q * s.q + s.p * s.p / (2.0 * pr.m);
}

inline double hamiltonian(const PhaseState& s, const SystemParams& pr) {
  return std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, PendulumParams>) {
          return pendulum_hamiltonian(s, p);
        } else {
          return spring_hamiltonian(s, p);
        }
      },
      pr);
}

// dq/dt = dH/dp, dp/dt = -dH/dq, hand-derived per system.
inline PhaseDeriv time_evolution(const PhaseState& s, const PendulumParams& pr) {
  return {s.p / (pr.m * pr.l * pr.l), -pr.m * pr.g * pr.l * std::sin(s.q)};
}

inline PhaseDeriv time_evolution(const PhaseState& s, const SpringParams& pr) {
  return {s.p / pr.m, -pr.k * s.q};
}

inline PhaseDeriv time_evolution(const PhaseState& s, const SystemParams& pr) {
  return std::visit([&](const auto& p) { return time_evolution(s, p); }, pr);
}

using VectorField = std::function<PhaseDeriv(const PhaseState&)>;

inline VectorField analytic_field(const SystemParams& pr) {
  return [pr](const PhaseState& s) { return time_evolution(s, pr); };
}

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double last_good)
      : std::runtime_error(what + " (last good time " + std::to_string(last_good) + ")"),
        last_good_time(last_good) {}
  double last_good_time;
};

namespace detail {
inline PhaseDeriv eval_field(const VectorField& f, const PhaseState& s, double t_diag) {
  const PhaseDeriv d = f(s);
  if (!std::isfinite(d.dq) || !std::isfinite(d.dp)) {
    throw IntegrationError("non-finite vector field value", t_diag);
  }
  return d;
}
}  // namespace detail

/// One classical RK4 step of size h.
inline PhaseState rk4_step(const PhaseState& s, const VectorField& f, double h) {
  if (!(h != 0.0) || !std::isfinite(h)) {
    throw std::invalid_argument("rk4_step: step must be finite and nonzero");
  }
  const PhaseDeriv k1 = detail::eval_field(f, s, 0.0);
  const PhaseDeriv k2 =
      detail::eval_field(f, {s.q + 0.5 * h * k1.dq, s.p + 0.5 * h * k1.dp}, 0.0);
  const PhaseDeriv k3 =
      detail::eval_field(f, {s.q + 0.5 * h * k2.dq, s.p + 0.5 * h * k2.dp}, 0.0);
  const PhaseDeriv k4 = detail::eval_field(f, {s.q + h * k3.dq, s.p + h * k3.dp}, 0.0);
  return {s.q + h / 6.0 * (k1.dq + 2.0 * (k2.dq + k3.dq) + k4.dq),
          s.p + h / 6.0 * (k1.dp + 2.0 * (k2.dp + k3.dp) + k4.dp)};
}

/// Adaptive RK4 with step-doubling (Richardson) error control and local
/// extrapolation. Steps are clipped to land exactly on every requested
/// output time; `times` must be strictly increasing and start at t0.
inline std::vector<PhaseState> integrate_adaptive(const PhaseState& s0,
                                                  const VectorField& f,
                                                  std::span<const double> times,
                                                  double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("integrate_adaptive: tol must be > 0");
  if (times.empty()) throw std::invalid_argument("integrate_adaptive: no output times");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) {
      throw std::invalid_argument("integrate_adaptive: times must be strictly increasing");
    }
  }

  std::vector<PhaseState> out;
  out.reserve(times.size());
  out.push_back(s0);
  if (times.size() == 1) return out;

  constexpr double kMinStep = 1e-10;
  PhaseState y = s0;
  double t = times.front();
  double h = std::min((times.back() - times.front()) / 100.0, 0.1);

  for (std::size_t k = 1; k < times.size(); ++k) {
    const double target = times[k];
    while (t < target) {
      const double hs = std::min(h, target - t);
      PhaseState big, half;
      try {
        big = rk4_step(y, f, hs);
        half = rk4_step(rk4_step(y, f, 0.5 * hs), f, 0.5 * hs);
      } catch (const IntegrationError&) {
        throw IntegrationError("non-finite vector field value", t);
      }
      const double eq = half.q - big.q;
      const double ep = half.p - big.p;
      const double scq = tol + tol * std::max(std::abs(y.q), std::abs(half.q));
      const double scp = tol + tol * std::max(std::abs(y.p), std::abs(half.p));
      // local error of the half-step result is (half - big) / 15
      const double err = std::max(std::abs(eq) / scq, std::abs(ep) / scp) / 15.0;

      if (err <= 1.0) {
        t += hs;
        y = {half.q + eq / 15.0, half.p + ep / 15.0};
        const double grow = err > 0.0 ? 0.9 * std::pow(err, -0.2) : 5.0;
        h = hs * std::clamp(grow, 0.2, 5.0);
      } else {
        h = hs * std::max(0.2, 0.9 * std::pow(err, -0.25));
        if (h < kMinStep) {
          throw IntegrationError("integrate_adaptive: step underflow below 1e-10", t);
        }
      }
    }
    out.push_back(y);
  }
  return out;
}

/// Closed-form mass-spring solution, the oracle for the adaptive integrator.
/// q(t) = q0 cos(wt) + p0/(m w) sin(wt), p(t) = -q0 m w sin(wt) + p0 cos(wt).
inline PhaseState spring_analytic(const PhaseState& s0, const SpringParams& pr, double t) {
  pr.validate();
  const double w = std::sqrt(pr.k / pr.m);
  const double c = std::cos(w * t), s = std::sin(w * t);
  return {s0.q * c + s0.p / (pr.m * w) * s, -s0.q * pr.m * w * s + s0.p * c};
}

inline std::vector<double> linspace(double a, double b, int n) {
  if (n < 1) throw std::invalid_argument("linspace: need at least one point");
  std::vector<double> v(static_cast<std::size_t>(n));
  if (n == 1) {
    v[0] = a;
    return v;
  }
  for (int i = 0; i < n; ++i) {
    v[static_cast<std::size_t>(i)] = a + (b - a) * static_cast<double>(i) / (n - 1);
  }
  return v;
}

/// Max over the path of |H - H0| / max(|H0|, 1e-12).
inline double relative_energy_drift(std::span<const PhaseState> states,
                                    const std::function<double(const PhaseState&)>& energy) {
  if (states.empty()) return 0.0;
  const double h0 = energy(states.front());
  const double denom = std::max(std::abs(h0), 1e-12);
  double worst = 0.0;
  for (const PhaseState& s : states) {
    worst = std::max(worst, std::abs(energy(s) - h0) / denom);
  }
  return worst;
}

}  // namespace hamildis
