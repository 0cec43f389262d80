#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "continuum/tensor.hpp"

namespace continuum::solvers {

/// Fixed-step schemes. Nominal global-error orders: Euler 1, AB2 2, ABM2 2,
/// RK4 4. AB2 is the 2-step explicit Adams-Bashforth; ABM2 is its
/// predictor-corrector pairing with the trapezoidal Adams-Moulton corrector
/// (one PECE sweep).
enum class SolverKind { Euler, AB2, ABM2, RK4 };

SolverKind solver_from_string(const std::string& name);
std::string to_string(SolverKind kind);
int nominal_order(SolverKind kind);

struct IntegrationConfig {
  double t0 = 0.0;
  double t1 = 1.0;
  int steps = 1;

  double step_size() const { return (t1 - t0) / steps; }
  void validate() const;
};

/// Raised when an integration state stops being finite; carries the step.
class DivergenceError : public NumericsError {
 public:
  DivergenceError(int step, const std::string& what)
      : NumericsError(what), step(step) {}
  int step;
};

// A state plugs into the drivers through two hooks, found via ADL:
//   State state_add_scaled(const State& a, double c, const State& b);  // a+c*b
//   bool  state_all_finite(const State& a);
using Vec = std::vector<double>;

Vec state_add_scaled(const Vec& a, double c, const Vec& b);
bool state_all_finite(const Vec& a);

template <typename S, typename F>
concept OdeField = requires(F f, double t, const S& y) {
  { f(t, y) } -> std::convertible_to<S>;
};

namespace detail {

template <typename S>
void check_finite(const S& y, int step) {
  if (!state_all_finite(y))
    throw DivergenceError(
        step, "integrate: non-finite state at step " + std::to_string(step));
}

template <typename S, typename F>
S rk4_step(F& field, double t, double h, const S& y) {
  S k1 = field(t, y);
  S k2 = field(t + 0.5 * h, state_add_scaled(y, 0.5 * h, k1));
  S k3 = field(t + 0.5 * h, state_add_scaled(y, 0.5 * h, k2));
  S k4 = field(t + h, state_add_scaled(y, h, k3));
  S out = state_add_scaled(y, h / 6.0, k1);
  out = state_add_scaled(out, h / 3.0, k2);
  out = state_add_scaled(out, h / 3.0, k3);
  return state_add_scaled(out, h / 6.0, k4);
}

}  // namespace detail

/// Deterministic fixed-step integration of y' = field(t, y) over
/// [cfg.t0, cfg.t1]. The multistep schemes bootstrap their missing history
/// with a single RK4 step, whose O(h^5) error cannot pollute the measured
/// order. When `trajectory` is given it receives steps+1 states including y0.
template <typename S, typename F>
  requires OdeField<S, F>
S integrate(F field, S y, const IntegrationConfig& cfg, SolverKind kind,
            std::vector<S>* trajectory = nullptr) {
  cfg.validate();
  detail::check_finite(y, 0);
  const double h = cfg.step_size();
  if (trajectory) {
    trajectory->clear();
    trajectory->reserve(static_cast<std::size_t>(cfg.steps) + 1);
    trajectory->push_back(y);
  }
  auto emit = [&](const S& s, int step) {
    detail::check_finite(s, step);
    if (trajectory) trajectory->push_back(s);
  };

  switch (kind) {
    case SolverKind::Euler: {
      for (int n = 0; n < cfg.steps; ++n) {
        double t = cfg.t0 + n * h;
        y = state_add_scaled(y, h, field(t, y));
        emit(y, n + 1);
      }
      return y;
    }
    case SolverKind::RK4: {
      for (int n = 0; n < cfg.steps; ++n) {
        double t = cfg.t0 + n * h;
        y = detail::rk4_step(field, t, h, y);
        emit(y, n + 1);
      }
      return y;
    }
    case SolverKind::AB2: {
      S f_prev = field(cfg.t0, y);
      S y_prev = y;
      y = detail::rk4_step(field, cfg.t0, h, y);
      if (cfg.steps >= 1) emit(y, 1);
      (void)y_prev;
      for (int n = 1; n < cfg.steps; ++n) {
        double t = cfg.t0 + n * h;
        S f_cur = field(t, y);
        S next = state_add_scaled(y, 1.5 * h, f_cur);
        next = state_add_scaled(next, -0.5 * h, f_prev);
        f_prev = std::move(f_cur);
        y = std::move(next);
        emit(y, n + 1);
      }
      return y;
    }
    case SolverKind::ABM2: {
      S f_prev = field(cfg.t0, y);
      y = detail::rk4_step(field, cfg.t0, h, y);
      if (cfg.steps >= 1) emit(y, 1);
      for (int n = 1; n < cfg.steps; ++n) {
        double t = cfg.t0 + n * h;
        S f_cur = field(t, y);
        // predict (AB2), evaluate, correct (trapezoidal), one sweep
        S pred = state_add_scaled(y, 1.5 * h, f_cur);
        pred = state_add_scaled(pred, -0.5 * h, f_prev);
        S f_pred = field(t + h, pred);
        S next = state_add_scaled(y, 0.5 * h, f_cur);
        next = state_add_scaled(next, 0.5 * h, f_pred);
        f_prev = std::move(f_cur);
        y = std::move(next);
        emit(y, n + 1);
      }
      return y;
    }
  }
  throw std::invalid_argument("integrate: unknown solver kind");
}

/// An IVP with an optional closed-form solution, used by the global-error
/// analysis. `lambda` is the stiffness coefficient for linear problems.
struct TestProblem {
  std::string name;
  std::function<Vec(double, const Vec&)> field;
  std::function<Vec(double)> exact;  // may be empty
  std::optional<double> lambda;
  Vec x0;
  double t0 = 0.0;
  double t1 = 1.0;
};

/// x' = -x, x(0) = 1; exact e^{-t}.
TestProblem decay_problem();

/// x' = lambda*x + sin t with lambda = -1, x(0) = 1;
/// exact 1.5 e^{-t} + 0.5 (sin t - cos t).
TestProblem forced_linear_problem();

struct GlobalErrorReport {
  std::vector<double> h_values;  // strictly decreasing
  std::vector<double> errors;    // ||x(t_f) - x_n|| per h
  double fitted_order = 0.0;     // least-squares slope of log e vs log h

  void write_csv(std::ostream& os) const;
};

/// Integrates the problem at each h, measures the final-time error against
/// the closed form, and fits the convergence order. Requires >= 4 h values
/// spanning at least two decades and a problem with an exact solution.
GlobalErrorReport estimate_convergence_order(const TestProblem& problem,
                                             SolverKind kind,
                                             const std::vector<double>& h_values);

/// Axis-aligned box in state space.
struct Region {
  std::vector<std::pair<double, double>> bounds;  // (lo, hi) per dimension
};

/// Sampled lower bound on the Lipschitz constant of the field over the
/// region: max ||f(t,a)-f(t,b)|| / ||a-b|| over random pairs, t ~ U[0,1].
double estimate_lipschitz(const std::function<Vec(double, const Vec&)>& field,
                          const Region& region, int samples,
                          std::uint64_t seed);

}  // namespace continuum::solvers
