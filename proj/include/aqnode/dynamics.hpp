// Single-qubit plant: non-Markovian rates, Bloch-vector dynamics with x/y
// controls, weak z-measurement output and derived observables.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <utility>

namespace aqnode {

template <typename Scalar>
using Bloch = Eigen::Matrix<Scalar, 3, 1>;
using BlochState = Bloch<double>;

/// Physical configuration of the qubit and its bath.
///
/// `r` is the bath cutoff ratio omega_c / omega0, `m_strength` the
/// measurement interaction M and `zeta` the detector efficiency.
template <typename Scalar>
struct SystemParamsT {
  Scalar alpha{0.5};
  Scalar r{0.3};
  Scalar m_strength{0.4};
  Scalar omega0{1.0};
  Scalar zeta{0.9};
  Scalar kbt{1.0};

  void validate() const {
    if (!(zeta > Scalar(0) && zeta < Scalar(1)))
      throw std::invalid_argument("SystemParams: zeta must lie in (0,1)");
    if (!(m_strength >= Scalar(0)))
      throw std::invalid_argument("SystemParams: m_strength must be >= 0");
    if (!(omega0 > Scalar(0) && r > Scalar(0) && alpha > Scalar(0) &&
          kbt > Scalar(0)))
      throw std::invalid_argument(
          "SystemParams: alpha, r, omega0 and kbt must be positive");
  }
};
using SystemParams = SystemParamsT<double>;

/// Bloch vector plus the hidden rates [x, y, z, delta, gamma].
template <typename Scalar>
struct AugmentedStateT {
  Bloch<Scalar> bloch{Bloch<Scalar>::Zero()};
  Scalar delta{0};
  Scalar gamma{0};

  Eigen::Matrix<Scalar, 5, 1> vector() const {
    Eigen::Matrix<Scalar, 5, 1> v;
    v << bloch, delta, gamma;
    return v;
  }
  static AugmentedStateT from_vector(const Eigen::Matrix<Scalar, 5, 1>& v) {
    return {v.template head<3>(), v(3), v(4)};
  }
};
using AugmentedState = AugmentedStateT<double>;

template <typename Scalar>
struct ControlInputT {
  Scalar ux{0};
  Scalar uy{0};
};
using ControlInput = ControlInputT<double>;

inline constexpr double kBlochTolerance = 1e-6;

/// Generator of rotations driven by u_x.
template <typename Scalar = double>
Eigen::Matrix<Scalar, 3, 3> control_matrix_x() {
  Eigen::Matrix<Scalar, 3, 3> a;
  a << 0, 0, 0,
       0, 0, -1,
       0, 1, 0;
  return a;
}

/// Generator of rotations driven by u_y.
template <typename Scalar = double>
Eigen::Matrix<Scalar, 3, 3> control_matrix_y() {
  Eigen::Matrix<Scalar, 3, 3> a;
  a << 0, 0, 1,
       0, 0, 0,
       -1, 0, 0;
  return a;
}

/// Dissipation rate gamma(t). The sine term sits inside the exponential
/// envelope so that gamma relaxes to alpha^2 omega0 r^2 / (1 + r^2).
template <typename Scalar>
Scalar gamma_t(Scalar t, const SystemParamsT<Scalar>& p) {
  using std::cos;
  using std::exp;
  using std::sin;
  const Scalar r2 = p.r * p.r;
  const Scalar pref = p.alpha * p.alpha * p.omega0 * r2 / (Scalar(1) + r2);
  const Scalar wt = p.omega0 * t;
  return pref * (Scalar(1) - exp(-p.r * wt) * (cos(wt) + p.r * sin(wt)));
}

/// High-temperature diffusion rate Delta(t).
template <typename Scalar>
Scalar delta_t(Scalar t, const SystemParamsT<Scalar>& p) {
  using std::cos;
  using std::exp;
  using std::sin;
  const Scalar r2 = p.r * p.r;
  const Scalar pref = Scalar(2) * p.alpha * p.alpha * p.kbt * r2 / (Scalar(1) + r2);
  const Scalar wt = p.omega0 * t;
  return pref * (Scalar(1) - exp(-p.r * wt) * (cos(wt) - sin(wt) / p.r));
}

template <typename Scalar>
Scalar gamma_limit(const SystemParamsT<Scalar>& p) {
  const Scalar r2 = p.r * p.r;
  return p.alpha * p.alpha * p.omega0 * r2 / (Scalar(1) + r2);
}

template <typename Scalar>
Scalar delta_limit(const SystemParamsT<Scalar>& p) {
  const Scalar r2 = p.r * p.r;
  return Scalar(2) * p.alpha * p.alpha * p.kbt * r2 / (Scalar(1) + r2);
}

/// Time derivative of the Bloch vector. The z row is affine:
/// dz/dt = -2 Delta z - 2 gamma - u_y x + u_x y.
template <typename Scalar>
Bloch<Scalar> bloch_rhs(const Bloch<Scalar>& s, Scalar delta, Scalar gamma,
                        const SystemParamsT<Scalar>& p,
                        const ControlInputT<Scalar>& u) {
  const Scalar damp = delta + p.m_strength / Scalar(2);
  Bloch<Scalar> d;
  d(0) = -damp * s(0) - p.omega0 * s(1) + u.uy * s(2);
  d(1) = -damp * s(1) + p.omega0 * s(0) - u.ux * s(2);
  d(2) = -Scalar(2) * delta * s(2) - Scalar(2) * gamma - u.uy * s(0) + u.ux * s(1);
  return d;
}

/// Convenience overload taking the rates from an augmented state.
template <typename Scalar>
Bloch<Scalar> bloch_rhs(const Bloch<Scalar>& s, const AugmentedStateT<Scalar>& aug,
                        const SystemParamsT<Scalar>& p,
                        const ControlInputT<Scalar>& u) {
  return bloch_rhs(s, aug.delta, aug.gamma, p, u);
}

/// Linear drift matrix used by the LQR design model (z diagonal -2Delta-2gamma).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> drift_matrix(Scalar delta, Scalar gamma,
                                         const SystemParamsT<Scalar>& p) {
  const Scalar damp = delta + p.m_strength / Scalar(2);
  Eigen::Matrix<Scalar, 3, 3> a;
  a << -damp, -p.omega0, 0,
       p.omega0, -damp, 0,
       0, 0, -Scalar(2) * delta - Scalar(2) * gamma;
  return a;
}

/// Weak-measurement output rate sqrt(M zeta) tr(-sigma_z rho) = -sqrt(M zeta) z.
template <typename Scalar>
Scalar measurement_rate(const Bloch<Scalar>& s, const SystemParamsT<Scalar>& p) {
  using std::sqrt;
  return -sqrt(p.m_strength * p.zeta) * s(2);
}

template <typename Scalar>
Eigen::Matrix<std::complex<Scalar>, 2, 2> density_from_bloch(const Bloch<Scalar>& s) {
  if (s.norm() > Scalar(1) + Scalar(kBlochTolerance))
    throw std::invalid_argument("density_from_bloch: Bloch vector outside the unit ball");
  using C = std::complex<Scalar>;
  Eigen::Matrix<C, 2, 2> rho;
  const Scalar h(0.5);
  rho(0, 0) = C(h * (Scalar(1) + s(2)), 0);
  rho(0, 1) = C(h * s(0), -h * s(1));
  rho(1, 0) = C(h * s(0), h * s(1));
  rho(1, 1) = C(h * (Scalar(1) - s(2)), 0);
  return rho;
}

template <typename Scalar>
Scalar purity(const Bloch<Scalar>& s) {
  return (Scalar(1) + s.squaredNorm()) / Scalar(2);
}

/// Excited / ground populations (P1, P2).
template <typename Scalar>
std::pair<Scalar, Scalar> populations(const Bloch<Scalar>& s) {
  const Scalar p1 = (Scalar(1) + s(2)) / Scalar(2);
  return {p1, Scalar(1) - p1};
}

template <typename Scalar>
Scalar fidelity(const Bloch<Scalar>& s, const Bloch<Scalar>& target) {
  return (Scalar(1) + s.dot(target)) / Scalar(2);
}

}  // namespace aqnode
