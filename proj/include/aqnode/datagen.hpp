// Ground-truth trajectory synthesis and the newline-delimited JSON dataset
// format.
#pragma once

#include "aqnode/dynamics.hpp"
#include "aqnode/integrate.hpp"
#include "aqnode/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace aqnode {

using Rng = std::mt19937_64;

enum class Split { kTrain, kWd, kOod };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Interval {
  double lo{0};
  double hi{0};
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Parameter intervals of one phase/split. Point values have lo == hi.
struct PhaseRegime {
  int phase{1};
  Split split{Split::kTrain};
  Interval alpha;
  Interval r;
  Interval m_strength;
  Interval omega0;
  double zeta{0.9};
  double kbt{1.0};

  /// Phase 3 reuses the phase-2 intervals and adds control inputs.
  static PhaseRegime make(int phase, Split split);
};

/// Default horizon for a phase: T = 5, dt = 0.01 for phases 1-2 and
/// T = 1, dt = 0.002 for phase 3.
TimeGrid default_grid(int phase);

SystemParams sample_params(const PhaseRegime& regime, Rng& rng);

/// Uniform draw from the Bloch ball with Delta(0) = gamma(0) = 0.
AugmentedState sample_initial_state(Rng& rng);

struct Trajectory {
  TimeGrid grid;
  std::vector<AugmentedState> states;
  std::vector<double> dy;
  std::vector<ControlInput> controls;
  SystemParams params;
  std::uint64_t seed{0};

  /// Exogenous inputs for the latent model.
  SignalTrack signals() const;
};

/// Feedback law evaluated on the true plant state at grid step `step`.
using ControlPolicy = std::function<ControlInput(int step, double t, const BlochState& state)>;
using PolicyFactory =
    std::function<ControlPolicy(const SystemParams&, const TimeGrid&, Rng&)>;

/// One RK4 step of the plant with rates evaluated at the stage times.
BlochState plant_step(const SystemParams& p, const BlochState& s, double t, double dt,
                      const ControlInput& u, long step = -1);

/// Open-loop simulation under a control schedule (one entry per grid point,
/// entry i held over step i). An empty schedule means u = 0.
Trajectory simulate_trajectory(const SystemParams& p, const AugmentedState& y0,
                               std::span<const ControlInput> controls, const TimeGrid& grid,
                               double noise_std = 0.0, std::uint64_t seed = 0);

/// Closed-loop simulation with a policy that sees the true state.
Trajectory simulate_feedback(const SystemParams& p, const AugmentedState& y0,
                             const ControlPolicy& policy, const TimeGrid& grid,
                             double noise_std = 0.0, std::uint64_t seed = 0);

struct GenerationOptions {
  PolicyFactory policy;               // empty: uncontrolled
  double south_pole_fraction{0.0};    // share of runs starting at [0, 0, -1]
  double noise_std{0.0};              // additive Gaussian noise on dY
};

struct DatasetHeader {
  int schema_version{1};
  PhaseRegime regime;
  TimeGrid grid;
  std::uint64_t seed{0};
  std::size_t count{0};
  double noise_std{0.0};
};

struct Dataset {
  DatasetHeader header;
  std::vector<Trajectory> records;
};

Dataset generate_dataset(const PhaseRegime& regime, std::size_t n_traj, const TimeGrid& grid,
                         std::uint64_t seed, const GenerationOptions& opts = {});

void write_dataset(std::ostream& os, const Dataset& ds);
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(std::istream& is);
Dataset read_dataset(const std::string& path);

/// y0 + eps * v with v a uniformly random unit direction in R^5.
AugmentedState perturb_initial(const AugmentedState& y0, double eps, Rng& rng);

}  // namespace aqnode
