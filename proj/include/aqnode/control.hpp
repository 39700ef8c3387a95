// Feedback control driven by model-predicted states: PD law, finite-horizon
// time-varying LQR from a backward Riccati sweep, and the closed-loop runner.
#pragma once

#include "aqnode/datagen.hpp"
#include "aqnode/dynamics.hpp"
#include "aqnode/integrate.hpp"
#include "aqnode/model.hpp"

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <variant>
#include <vector>

namespace aqnode {

using Matrix3 = Eigen::Matrix3d;
using Matrix32 = Eigen::Matrix<double, 3, 2>;
using Matrix23 = Eigen::Matrix<double, 2, 3>;
using Matrix2 = Eigen::Matrix2d;

struct PdGains {
  double kp_x{5.0};
  double kp_y{10.0};
  double kd_x{8.0};
  double kd_y{10.0};
};

struct LqrConfig {
  Matrix3 q{Matrix3::Identity() * 1000.0};
  Matrix2 r{Eigen::Vector2d(0.1, 50.0).asDiagonal()};
  BlochState target{0.0, 0.0, 1.0};
  Matrix3 terminal{Matrix3::Zero()};
};

struct GainSchedule {
  TimeGrid grid;
  std::vector<Matrix3> p;
  std::vector<Matrix23> k;
};

/// Columns A_x target and A_y target.
Matrix32 lqr_b_matrix(const BlochState& target);

/// Drift matrix as a function of time for the Riccati design model.
using DriftFn = std::function<Matrix3(double)>;

/// Piecewise-linear interpolation of a per-grid-point drift schedule.
DriftFn drift_from_schedule(std::vector<Matrix3> schedule, const TimeGrid& grid);

/// Integrates dP/dt = -(A^T P + P A - P B R^-1 B^T P + Q) backward from the
/// terminal condition with RK4; K(t) = R^-1 B^T P(t).
GainSchedule riccati_solve(const DriftFn& drift, const Matrix32& b, const LqrConfig& cfg,
                           const TimeGrid& grid);
GainSchedule riccati_solve(const std::vector<Matrix3>& a_schedule, const Matrix32& b,
                           const LqrConfig& cfg, const TimeGrid& grid);

/// Drift schedule built from rate samples (one per grid point).
std::vector<Matrix3> drift_schedule(const std::vector<double>& delta,
                                    const std::vector<double>& gamma, const SystemParams& p);

/// u = -K (state_hat - target)
ControlInput lqr_control(const Matrix23& k, const BlochState& state_hat, const BlochState& target);

/// u_x = -kp_x e_x - kd_x (x_hat - x_hat_prev) / dt, likewise for y.
ControlInput pd_control(const BlochState& state_hat, const BlochState& state_hat_prev, double dt,
                        const PdGains& g, const BlochState& target);

struct PdController {
  PdGains gains;
};
struct LqrController {
  GainSchedule schedule;
};
using Controller = std::variant<PdController, LqrController>;

std::string controller_label(const Controller& c);

struct ClosedLoopResult {
  TimeGrid grid;
  std::vector<BlochState> plant;              // true states
  std::vector<AugmentedState> plant_aug;      // true states with true rates
  std::vector<AugmentedState> predicted;      // decoded model states
  std::vector<Vector> latents;
  std::vector<ControlInput> controls;         // entry i held over step i
  std::vector<double> dy;
  std::string label;
  SystemParams params;
};

/// Runs plant, model and controller together. The first prefix_len - 1 steps
/// are uncontrolled while the encoder's measurement prefix is collected.
ClosedLoopResult closed_loop_run(const SystemParams& p, const AqnodeModel& m,
                                 const Controller& controller, const AugmentedState& y0,
                                 const TimeGrid& grid, const BlochState& target,
                                 double noise_std = 0.0, std::uint64_t noise_seed = 0);

/// Model-predicted rates over the horizon from an uncontrolled run; used to
/// build the LQR design drift ahead of the closed-loop run.
std::pair<std::vector<double>, std::vector<double>> predicted_rates(const SystemParams& p,
                                                                    const AqnodeModel& m,
                                                                    const AugmentedState& y0,
                                                                    const TimeGrid& grid);

/// LQR gain schedule from model-predicted rates, or the analytic rates when
/// `use_true_rates` is set.
GainSchedule design_lqr(const SystemParams& p, const AqnodeModel* m, const AugmentedState& y0,
                        const TimeGrid& grid, const LqrConfig& cfg, bool use_true_rates);

/// Control excitation used to synthesise controlled training data: LQR on
/// the noisy true state for a share of runs, smooth random fields otherwise.
struct ExpertConfig {
  double lqr_fraction{0.6};
  double feedback_noise_max{0.05};
  double random_amplitude{20.0};
  int random_harmonics{4};
  LqrConfig lqr{};
};

PolicyFactory expert_policy_factory(const ExpertConfig& cfg);

}  // namespace aqnode
