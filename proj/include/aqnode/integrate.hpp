// Fixed-step classical Runge-Kutta integration for Eigen-valued states.
//
// States are any dense Eigen object (vectors, or matrices which behave as
// row-major-flattened vectors element-wise). Negative steps integrate
// backward in time.
#pragma once

#include <Eigen/Dense>

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aqnode {

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double time, long step)
      : std::runtime_error(what), time_(time), step_(step) {}
  double time() const { return time_; }
  /// Step index at which the failure occurred, -1 if unknown.
  long step() const { return step_; }

 private:
  double time_;
  long step_;
};

struct TimeGrid {
  double t0{0.0};
  double t1{1.0};
  int n_steps{1};

  TimeGrid() = default;
  TimeGrid(double start, double end, int steps) : t0(start), t1(end), n_steps(steps) {
    validate();
  }

  void validate() const {
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps must be positive");
    if (!(t1 > t0)) throw std::invalid_argument("TimeGrid: t1 must exceed t0");
  }
  double dt() const { return (t1 - t0) / n_steps; }
  /// Grid point i, computed without accumulating rounding.
  double time(int i) const { return i == n_steps ? t1 : t0 + i * dt(); }
  int size() const { return n_steps + 1; }
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

/// One classical RK4 step of dy/dt = f(t, y).
template <typename State, typename Rhs>
State rk4_step(Rhs&& f, const State& y, double t, double dt, long step = -1) {
  auto check = [&](const State& k, double at) {
    if (!all_finite(k)) {
      std::ostringstream os;
      os << "rk4_step: non-finite value at t=" << at;
      if (step >= 0) os << " (step " << step << ")";
      throw IntegrationError(os.str(), at, step);
    }
  };
  const double half = 0.5 * dt;
  const State k1 = f(t, y);
  check(k1, t);
  const State k2 = f(t + half, State(y + half * k1));
  check(k2, t + half);
  const State k3 = f(t + half, State(y + half * k2));
  check(k3, t + half);
  const State k4 = f(t + dt, State(y + dt * k3));
  check(k4, t + dt);
  State next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  check(next, t + dt);
  return next;
}

/// Returns the n_steps + 1 states on the grid, starting with y0.
template <typename State, typename Rhs>
std::vector<State> integrate_forward(Rhs&& f, const State& y0, const TimeGrid& grid) {
  grid.validate();
  if (!all_finite(y0))
    throw IntegrationError("integrate_forward: non-finite initial state", grid.t0, 0);
  std::vector<State> out;
  out.reserve(grid.size());
  out.push_back(y0);
  const double dt = grid.dt();
  for (int i = 0; i < grid.n_steps; ++i)
    out.push_back(rk4_step(f, out.back(), grid.time(i), dt, i));
  return out;
}

/// Integrates from t1 down to t0. Element i of the result is the state at
/// grid.time(i), so the first element is the value at t0 and the last is yT.
template <typename State, typename Rhs>
std::vector<State> integrate_backward(Rhs&& f, const State& yT, const TimeGrid& grid) {
  grid.validate();
  if (!all_finite(yT))
    throw IntegrationError("integrate_backward: non-finite terminal state", grid.t1,
                           grid.n_steps);
  std::vector<State> out(grid.size());
  out[grid.n_steps] = yT;
  const double dt = grid.dt();
  for (int i = grid.n_steps; i > 0; --i)
    out[i - 1] = rk4_step(f, out[i], grid.time(i), -dt, i);
  return out;
}

}  // namespace aqnode
