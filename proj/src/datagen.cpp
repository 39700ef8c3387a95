#include "aqnode/datagen.hpp"

#include "json_io.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace aqnode {

using detail::json;

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kWd: return "wd";
    case Split::kOod: return "ood";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "wd" || name == "wd_test") return Split::kWd;
  if (name == "ood" || name == "ood_test") return Split::kOod;
  throw std::invalid_argument("unknown split '" + name + "'");
}

PhaseRegime PhaseRegime::make(int phase, Split split) {
  PhaseRegime r;
  r.phase = phase;
  r.split = split;
  switch (split) {
    case Split::kTrain:
      r.alpha = {0.4, 0.7};
      r.r = {0.2, 0.5};
      break;
    case Split::kWd:
      r.alpha = {0.45, 0.65};
      r.r = {0.25, 0.45};
      break;
    case Split::kOod:
      r.alpha = {0.2, 0.8};
      r.r = {0.1, 0.6};
      break;
  }
  if (phase == 1) {
    r.m_strength = {0.4, 0.4};
    r.omega0 = {1.0, 1.0};
  } else if (phase == 2 || phase == 3) {
    switch (split) {
      case Split::kTrain:
        r.m_strength = {0.3, 0.5};
        r.omega0 = {0.8, 1.2};
        break;
      case Split::kWd:
        r.m_strength = {0.32, 0.48};
        r.omega0 = {0.85, 1.15};
        break;
      case Split::kOod:
        r.m_strength = {0.2, 0.6};
        r.omega0 = {0.6, 1.5};
        break;
    }
  } else {
    throw std::invalid_argument("PhaseRegime: phase must be 1, 2 or 3");
  }
  return r;
}

TimeGrid default_grid(int phase) {
  if (phase == 3) return TimeGrid(0.0, 1.0, 500);
  return TimeGrid(0.0, 5.0, 500);
}

namespace {

double draw(const Interval& iv, Rng& rng) {
  if (iv.lo == iv.hi) return iv.lo;
  std::uniform_real_distribution<double> u(iv.lo, iv.hi);
  return u(rng);
}

}  // namespace

SystemParams sample_params(const PhaseRegime& regime, Rng& rng) {
  SystemParams p;
  p.alpha = draw(regime.alpha, rng);
  p.r = draw(regime.r, rng);
  p.m_strength = draw(regime.m_strength, rng);
  p.omega0 = draw(regime.omega0, rng);
  p.zeta = regime.zeta;
  p.kbt = regime.kbt;
  return p;
}

AugmentedState sample_initial_state(Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  BlochState s;
  do {
    s = BlochState(u(rng), u(rng), u(rng));
  } while (s.squaredNorm() > 1.0);
  return {s, 0.0, 0.0};
}

SignalTrack Trajectory::signals() const {
  SignalTrack s;
  s.grid = grid;
  s.dy = dy;
  s.ux.reserve(controls.size());
  s.uy.reserve(controls.size());
  for (const ControlInput& u : controls) {
    s.ux.push_back(u.ux);
    s.uy.push_back(u.uy);
  }
  return s;
}

BlochState plant_step(const SystemParams& p, const BlochState& s, double t, double dt,
                      const ControlInput& u, long step) {
  auto f = [&](double tau, const BlochState& y) {
    return bloch_rhs(y, delta_t(tau, p), gamma_t(tau, p), p, u);
  };
  return rk4_step(f, s, t, dt, step);
}

namespace {

template <typename ControlAt>
Trajectory simulate(const SystemParams& p, const AugmentedState& y0, ControlAt&& control_at,
                    const TimeGrid& grid, double noise_std, std::uint64_t seed) {
  p.validate();
  grid.validate();
  if (noise_std < 0) throw std::invalid_argument("simulate: noise_std must be >= 0");
  Trajectory tr;
  tr.grid = grid;
  tr.params = p;
  tr.seed = seed;
  const int n = grid.n_steps;
  tr.states.reserve(n + 1);
  tr.dy.reserve(n + 1);
  tr.controls.reserve(n + 1);
  Rng noise_rng(seed);
  std::normal_distribution<double> normal(0.0, noise_std > 0 ? noise_std : 1.0);
  BlochState s = y0.bloch;
  const double dt = grid.dt();
  for (int i = 0; i <= n; ++i) {
    const double t = grid.time(i);
    AugmentedState aug{s, delta_t(t, p), gamma_t(t, p)};
    if (i == 0) {
      aug.delta = y0.delta;
      aug.gamma = y0.gamma;
    }
    double dy = measurement_rate(s, p);
    if (noise_std > 0) dy += normal(noise_rng);
    tr.states.push_back(aug);
    tr.dy.push_back(dy);
    const ControlInput u = control_at(i, t, s);
    tr.controls.push_back(u);
    if (i < n) s = plant_step(p, s, t, dt, u, i);
  }
  return tr;
}

}  // namespace

Trajectory simulate_trajectory(const SystemParams& p, const AugmentedState& y0,
                               std::span<const ControlInput> controls, const TimeGrid& grid,
                               double noise_std, std::uint64_t seed) {
  if (!controls.empty() && static_cast<int>(controls.size()) != grid.size())
    throw std::invalid_argument("simulate_trajectory: schedule must have one entry per grid point");
  return simulate(
      p, y0,
      [&](int i, double, const BlochState&) {
        return controls.empty() ? ControlInput{} : controls[i];
      },
      grid, noise_std, seed);
}

Trajectory simulate_feedback(const SystemParams& p, const AugmentedState& y0,
                             const ControlPolicy& policy, const TimeGrid& grid, double noise_std,
                             std::uint64_t seed) {
  return simulate(
      p, y0, [&](int i, double t, const BlochState& s) { return policy(i, t, s); }, grid,
      noise_std, seed);
}

Dataset generate_dataset(const PhaseRegime& regime, std::size_t n_traj, const TimeGrid& grid,
                         std::uint64_t seed, const GenerationOptions& opts) {
  if (n_traj < 1) throw std::invalid_argument("generate_dataset: n_traj must be >= 1");
  Dataset ds;
  ds.header.regime = regime;
  ds.header.grid = grid;
  ds.header.seed = seed;
  ds.header.count = n_traj;
  ds.header.noise_std = opts.noise_std;
  ds.records.reserve(n_traj);
  Rng master(seed);
  for (std::size_t k = 0; k < n_traj; ++k) {
    const std::uint64_t traj_seed = master();
    Rng rng(traj_seed);
    const SystemParams p = sample_params(regime, rng);
    AugmentedState y0 = sample_initial_state(rng);
    if (opts.south_pole_fraction > 0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(rng) < opts.south_pole_fraction) y0.bloch = BlochState(0, 0, -1);
    }
    if (opts.policy) {
      const ControlPolicy policy = opts.policy(p, grid, rng);
      ds.records.push_back(simulate_feedback(p, y0, policy, grid, opts.noise_std, traj_seed));
    } else {
      ds.records.push_back(simulate_trajectory(p, y0, {}, grid, opts.noise_std, traj_seed));
    }
  }
  return ds;
}

namespace {

json header_to_json(const DatasetHeader& h) {
  return {{"schema_version", h.schema_version},
          {"kind", "aqnode-dataset"},
          {"regime", detail::to_json(h.regime)},
          {"grid", detail::to_json(h.grid)},
          {"seed", h.seed},
          {"count", h.count},
          {"noise_std", h.noise_std}};
}

json record_to_json(const Trajectory& tr) {
  const std::size_t n = tr.states.size();
  std::vector<double> t(n), x(n), y(n), z(n), delta(n), gamma(n), ux(n), uy(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = tr.grid.time(static_cast<int>(i));
    x[i] = tr.states[i].bloch(0);
    y[i] = tr.states[i].bloch(1);
    z[i] = tr.states[i].bloch(2);
    delta[i] = tr.states[i].delta;
    gamma[i] = tr.states[i].gamma;
    ux[i] = tr.controls[i].ux;
    uy[i] = tr.controls[i].uy;
  }
  const auto y0 = tr.states.front().vector();
  return {{"seed", tr.seed},
          {"params", detail::to_json(tr.params)},
          {"y0", std::vector<double>(y0.data(), y0.data() + 5)},
          {"t", t},
          {"x", x},
          {"y", y},
          {"z", z},
          {"delta", delta},
          {"gamma", gamma},
          {"dy", tr.dy},
          {"ux", ux},
          {"uy", uy}};
}

Trajectory record_from_json(const json& j, const TimeGrid& grid) {
  Trajectory tr;
  tr.grid = grid;
  tr.seed = j.value("seed", std::uint64_t{0});
  tr.params = detail::params_from_json(j.at("params"));
  const auto x = j.at("x").get<std::vector<double>>();
  const auto y = j.at("y").get<std::vector<double>>();
  const auto z = j.at("z").get<std::vector<double>>();
  const auto delta = j.at("delta").get<std::vector<double>>();
  const auto gamma = j.at("gamma").get<std::vector<double>>();
  const auto ux = j.at("ux").get<std::vector<double>>();
  const auto uy = j.at("uy").get<std::vector<double>>();
  tr.dy = j.at("dy").get<std::vector<double>>();
  const std::size_t n = static_cast<std::size_t>(grid.size());
  for (const std::vector<double>* v : std::initializer_list<const std::vector<double>*>{&x, &y, &z, &delta, &gamma, &ux, &uy, &tr.dy})
    if (v->size() != n) throw std::runtime_error("dataset record length does not match grid");
  const auto y0 = j.at("y0").get<std::vector<double>>();
  if (y0.size() != 5) throw std::runtime_error("dataset record y0 must have 5 entries");
  for (std::size_t i = 0; i < n; ++i) {
    tr.states.push_back({BlochState(x[i], y[i], z[i]), delta[i], gamma[i]});
    tr.controls.push_back({ux[i], uy[i]});
  }
  return tr;
}

}  // namespace

void write_dataset(std::ostream& os, const Dataset& ds) {
  DatasetHeader h = ds.header;
  h.count = ds.records.size();
  os << header_to_json(h).dump() << '\n';
  for (const Trajectory& tr : ds.records) os << record_to_json(tr).dump() << '\n';
  if (!os) throw std::runtime_error("write_dataset: stream failure");
}

void write_dataset(const std::string& path, const Dataset& ds) {
  auto os = detail::open_out(path);
  write_dataset(os, ds);
  os.flush();
  if (!os) throw std::runtime_error("write_dataset: failed writing '" + path + "'");
}

Dataset read_dataset(std::istream& is) {
  Dataset ds;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_dataset: missing header line");
  json h;
  try {
    h = json::parse(line);
    ds.header.schema_version = h.at("schema_version").get<int>();
    ds.header.regime = detail::regime_from_json(h.at("regime"));
    ds.header.grid = detail::grid_from_json(h.at("grid"));
    ds.header.seed = h.at("seed").get<std::uint64_t>();
    ds.header.count = h.at("count").get<std::size_t>();
    ds.header.noise_std = h.value("noise_std", 0.0);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("read_dataset: bad header: ") + e.what());
  }
  if (ds.header.schema_version != 1)
    throw std::runtime_error("read_dataset: unsupported schema version");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      ds.records.push_back(record_from_json(json::parse(line), ds.header.grid));
    } catch (const std::exception& e) {
      throw std::runtime_error("read_dataset: bad record on line " + std::to_string(lineno) +
                               ": " + e.what());
    }
  }
  if (ds.records.size() != ds.header.count)
    throw std::runtime_error("read_dataset: header count does not match record count");
  return ds;
}

Dataset read_dataset(const std::string& path) {
  auto is = detail::open_in(path);
  try {
    return read_dataset(is);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

AugmentedState perturb_initial(const AugmentedState& y0, double eps, Rng& rng) {
  if (eps < 0) throw std::invalid_argument("perturb_initial: eps must be >= 0");
  if (eps == 0) return y0;
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Matrix<double, 5, 1> n;
  do {
    for (int i = 0; i < 5; ++i) n(i) = normal(rng);
  } while (n.norm() == 0.0);
  return AugmentedState::from_vector(y0.vector() + eps * (n / n.norm()));
}

}  // namespace aqnode
