#include "aqnode/control.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace aqnode {

Matrix32 lqr_b_matrix(const BlochState& target) {
  Matrix32 b;
  b.col(0) = control_matrix_x() * target;
  b.col(1) = control_matrix_y() * target;
  return b;
}

DriftFn drift_from_schedule(std::vector<Matrix3> schedule, const TimeGrid& grid) {
  if (static_cast<int>(schedule.size()) != grid.size())
    throw std::invalid_argument("drift_from_schedule: one matrix per grid point required");
  return [schedule = std::move(schedule), grid](double t) -> Matrix3 {
    const double s = (t - grid.t0) / grid.dt();
    if (s <= 0) return schedule.front();
    if (s >= grid.n_steps) return schedule.back();
    const int i = static_cast<int>(std::floor(s));
    const double w = s - i;
    if (w == 0.0) return schedule[i];
    return (1.0 - w) * schedule[i] + w * schedule[i + 1];
  };
}

std::vector<Matrix3> drift_schedule(const std::vector<double>& delta,
                                    const std::vector<double>& gamma, const SystemParams& p) {
  if (delta.size() != gamma.size())
    throw std::invalid_argument("drift_schedule: rate tracks differ in length");
  std::vector<Matrix3> out;
  out.reserve(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) out.push_back(drift_matrix(delta[i], gamma[i], p));
  return out;
}

GainSchedule riccati_solve(const DriftFn& drift, const Matrix32& b, const LqrConfig& cfg,
                           const TimeGrid& grid) {
  Eigen::LLT<Matrix2> r_llt(cfg.r);
  if (r_llt.info() != Eigen::Success || !cfg.r.isApprox(cfg.r.transpose()))
    throw std::invalid_argument("riccati_solve: R must be symmetric positive definite");
  const Matrix2 r_inv = r_llt.solve(Matrix2::Identity());
  const Matrix3 s = b * r_inv * b.transpose();
  auto rhs = [&](double t, const Matrix3& p) -> Matrix3 {
    const Matrix3 a = drift(t);
    return -(a.transpose() * p + p * a - p * s * p + cfg.q);
  };
  GainSchedule out;
  out.grid = grid;
  try {
    out.p = integrate_backward(rhs, cfg.terminal, grid);
  } catch (const IntegrationError& e) {
    std::ostringstream os;
    os << "riccati_solve: P(t) escaped to infinity near t=" << e.time();
    throw IntegrationError(os.str(), e.time(), e.step());
  }
  out.k.reserve(out.p.size());
  for (const Matrix3& p : out.p) out.k.push_back(r_inv * b.transpose() * p);
  return out;
}

GainSchedule riccati_solve(const std::vector<Matrix3>& a_schedule, const Matrix32& b,
                           const LqrConfig& cfg, const TimeGrid& grid) {
  return riccati_solve(drift_from_schedule(a_schedule, grid), b, cfg, grid);
}

ControlInput lqr_control(const Matrix23& k, const BlochState& state_hat, const BlochState& target) {
  const Eigen::Vector2d u = -k * (state_hat - target);
  return {u(0), u(1)};
}

ControlInput pd_control(const BlochState& state_hat, const BlochState& state_hat_prev, double dt,
                        const PdGains& g, const BlochState& target) {
  if (!(dt > 0)) throw std::invalid_argument("pd_control: dt must be positive");
  const double vx = (state_hat(0) - state_hat_prev(0)) / dt;
  const double vy = (state_hat(1) - state_hat_prev(1)) / dt;
  return {-g.kp_x * (state_hat(0) - target(0)) - g.kd_x * vx,
          -g.kp_y * (state_hat(1) - target(1)) - g.kd_y * vy};
}

std::string controller_label(const Controller& c) {
  return std::holds_alternative<PdController>(c) ? "PD" : "LQR";
}

ClosedLoopResult closed_loop_run(const SystemParams& p, const AqnodeModel& m,
                                 const Controller& controller, const AugmentedState& y0,
                                 const TimeGrid& grid, const BlochState& target, double noise_std,
                                 std::uint64_t noise_seed) {
  p.validate();
  grid.validate();
  if (m.signals.mode != SignalMode::kControl)
    throw std::invalid_argument("closed_loop_run: model was not built for control inputs");
  if (const auto* lqr = std::get_if<LqrController>(&controller)) {
    if (lqr->schedule.grid.n_steps != grid.n_steps ||
        static_cast<int>(lqr->schedule.k.size()) != grid.size())
      throw std::invalid_argument("closed_loop_run: gain schedule grid does not match run grid");
  }
  const int n = grid.n_steps;
  const int warm = std::max(m.prefix_len - 1, 0);
  if (warm > n) throw std::invalid_argument("closed_loop_run: horizon shorter than encoder prefix");

  ClosedLoopResult res;
  res.grid = grid;
  res.label = controller_label(controller);
  res.params = p;
  res.plant.reserve(n + 1);
  res.controls.reserve(n + 1);
  res.dy.reserve(n + 1);
  res.latents.reserve(n + 1);

  Rng noise_rng(noise_seed);
  std::normal_distribution<double> normal(0.0, noise_std > 0 ? noise_std : 1.0);
  const double dt = grid.dt();
  BlochState s = y0.bloch;
  BlochState prev_hat = BlochState::Zero();

  auto decode = [&](const Vector& h) {
    return AugmentedState::from_vector(m.decoder.forward(h).head<5>());
  };

  for (int i = 0; i <= n; ++i) {
    const double t = grid.time(i);
    res.plant.push_back(s);
    double dy = measurement_rate(s, p);
    if (noise_std > 0) dy += normal(noise_rng);
    res.dy.push_back(dy);

    ControlInput u{};
    if (i == warm) {
      const Vector h0 = encode(m, y0, std::span(res.dy.data(), m.prefix_len));
      res.latents.push_back(h0);
      for (int j = 0; j < warm; ++j)
        res.latents.push_back(latent_step(m, res.latents.back(), grid.time(j), dt,
                                          res.controls[j].ux, res.controls[j].uy, res.dy[j], j));
      for (const Vector& h : res.latents) res.predicted.push_back(decode(h));
      prev_hat = res.predicted.back().bloch;
    } else if (i > warm) {
      res.latents.push_back(latent_step(m, res.latents.back(), grid.time(i - 1), dt,
                                        res.controls[i - 1].ux, res.controls[i - 1].uy,
                                        res.dy[i - 1], i - 1));
      res.predicted.push_back(decode(res.latents.back()));
    }
    if (i >= warm) {
      const BlochState& hat = res.predicted.back().bloch;
      if (const auto* pd = std::get_if<PdController>(&controller)) {
        u = pd_control(hat, prev_hat, dt, pd->gains, target);
      } else {
        u = lqr_control(std::get<LqrController>(controller).schedule.k[i], hat, target);
      }
      prev_hat = hat;
    }
    if (!std::isfinite(u.ux) || !std::isfinite(u.uy)) {
      std::ostringstream os;
      os << "closed_loop_run: non-finite control at step " << i;
      throw IntegrationError(os.str(), t, i);
    }
    res.controls.push_back(u);
    if (i < n) s = plant_step(p, s, t, dt, u, i);
  }

  res.plant_aug.reserve(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double t = grid.time(i);
    res.plant_aug.push_back({res.plant[i], delta_t(t, p), gamma_t(t, p)});
  }
  return res;
}

std::pair<std::vector<double>, std::vector<double>> predicted_rates(const SystemParams& p,
                                                                    const AqnodeModel& m,
                                                                    const AugmentedState& y0,
                                                                    const TimeGrid& grid) {
  const Trajectory open = simulate_trajectory(p, y0, {}, grid);
  const auto pred = predict(m, y0, open.signals());
  std::vector<double> delta, gamma;
  delta.reserve(pred.size());
  gamma.reserve(pred.size());
  for (const AugmentedState& a : pred) {
    delta.push_back(a.delta);
    gamma.push_back(a.gamma);
  }
  return {delta, gamma};
}

GainSchedule design_lqr(const SystemParams& p, const AqnodeModel* m, const AugmentedState& y0,
                        const TimeGrid& grid, const LqrConfig& cfg, bool use_true_rates) {
  std::vector<double> delta, gamma;
  if (use_true_rates || m == nullptr) {
    for (int i = 0; i < grid.size(); ++i) {
      delta.push_back(delta_t(grid.time(i), p));
      gamma.push_back(gamma_t(grid.time(i), p));
    }
  } else {
    std::tie(delta, gamma) = predicted_rates(p, *m, y0, grid);
  }
  return riccati_solve(drift_schedule(delta, gamma, p), lqr_b_matrix(cfg.target), cfg, grid);
}

PolicyFactory expert_policy_factory(const ExpertConfig& cfg) {
  return [cfg](const SystemParams& p, const TimeGrid& grid, Rng& rng) -> ControlPolicy {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (unit(rng) < cfg.lqr_fraction) {
      const GainSchedule sched = design_lqr(p, nullptr, {}, grid, cfg.lqr, true);
      const double sigma = cfg.feedback_noise_max * unit(rng);
      auto noise_rng = std::make_shared<Rng>(rng());
      const BlochState target = cfg.lqr.target;
      return [sched, sigma, noise_rng, target](int step, double, const BlochState& s) {
        std::normal_distribution<double> normal(0.0, 1.0);
        BlochState seen = s;
        if (sigma > 0)
          for (int c = 0; c < 3; ++c) seen(c) += sigma * normal(*noise_rng);
        return lqr_control(sched.k[step], seen, target);
      };
    }
    // Sum of random sinusoids per axis with peak amplitude at most random_amplitude.
    const int nh = std::max(cfg.random_harmonics, 1);
    const double span = grid.t1 - grid.t0;
    std::vector<double> amp(2 * nh), freq(2 * nh), phase(2 * nh);
    const double scale = cfg.random_amplitude * unit(rng);
    for (int k = 0; k < 2 * nh; ++k) {
      amp[k] = scale * unit(rng) / nh;
      freq[k] = 2.0 * std::numbers::pi * (1.0 + 5.0 * unit(rng)) / span;
      phase[k] = 2.0 * std::numbers::pi * unit(rng);
    }
    return [amp, freq, phase, nh](int, double t, const BlochState&) {
      ControlInput u;
      for (int k = 0; k < nh; ++k) {
        u.ux += amp[k] * std::sin(freq[k] * t + phase[k]);
        u.uy += amp[nh + k] * std::sin(freq[nh + k] * t + phase[nh + k]);
      }
      return u;
    };
  };
}

}  // namespace aqnode
