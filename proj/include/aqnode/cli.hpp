// Command-line front end: generate, train, evaluate, control, perturb.
#pragma once

#include "aqnode/control.hpp"
#include "aqnode/datagen.hpp"

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

namespace aqnode::cli {

/// Physical and controller defaults read from config/defaults.json.
struct RunDefaults {
  double zeta{0.9};
  double kbt{1.0};
  std::array<TimeGrid, 3> grids{default_grid(1), default_grid(2), default_grid(3)};
  double noise_std{0.0};
  double phase3_south_pole_fraction{0.5};
  ExpertConfig expert{};
  PdGains pd{};
  LqrConfig lqr{};
  BlochState control_y0{0.0, 0.0, -1.0};
  int control_draws{8};
  bool use_true_rates{false};

  const TimeGrid& grid(int phase) const { return grids.at(phase - 1); }
};

RunDefaults load_defaults(const std::string& path);

/// $AQNODE_DEFAULTS if set, otherwise the copy in the source tree.
std::string default_config_path();

/// Exit status: 0 success, 1 usage error, 2 runtime error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace aqnode::cli
