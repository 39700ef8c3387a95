// Control metrics, observable traces, latent dumps and report files.
#pragma once

#include "aqnode/control.hpp"
#include "aqnode/datagen.hpp"
#include "aqnode/model.hpp"
#include "aqnode/trainer.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace aqnode {

struct ControlMetrics {
  std::string mode;        // "Real" or "Pred"
  std::string controller;  // "PD" or "LQR"
  std::string split;       // "WD" or "OOD"
  double traj_mse{0};
  double energy{0};
  double deviation{0};
  double fidelity{0};
};

/// Trapezoidal integral of u_x^2 + u_y^2 over the grid (one control per point).
double control_energy(const std::vector<ControlInput>& controls, const TimeGrid& grid);

/// ||s - target||^2
double final_deviation(const BlochState& s, const BlochState& target);

/// Real row (plant final state) and Pred row (decoded final state); both
/// share the energy and the predicted-vs-plant state-track MSE.
std::pair<ControlMetrics, ControlMetrics> control_metrics(const ClosedLoopResult& res,
                                                          const BlochState& target,
                                                          const std::string& split = "WD");

struct ObservableTrace {
  std::vector<double> t;
  std::vector<double> purity;
  std::vector<double> coherence;
  std::vector<double> p1;
  std::vector<double> p2;
};

ObservableTrace trace_observables(const std::vector<BlochState>& states, const TimeGrid& grid);
ObservableTrace trace_observables(const Trajectory& tr);

void write_observables_csv(std::ostream& os, const ObservableTrace& trace);

/// CSV with columns traj_id, label, t, h_1..h_d.
void dump_latents(const AqnodeModel& m, const Dataset& ds, const std::string& label,
                  std::ostream& os);
void dump_latents(const std::vector<ClosedLoopResult>& runs, const std::string& label,
                  std::ostream& os);

struct MseRow {
  std::string label;
  ComponentMse mse;
};

struct Report {
  std::uint64_t seed{0};
  std::string config;  // JSON object echoed verbatim, empty for none
  std::vector<MseRow> mse_rows;
  std::vector<ControlMetrics> control_rows;
};

/// Writes <stem>.json, <stem>_mse.csv and <stem>_control.csv.
void emit_report(const Report& report, const std::string& stem);
std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);
Report read_report(const std::string& json_path);

}  // namespace aqnode
