#include "aqnode/eval.hpp"

#include "json_io.hpp"

#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace aqnode {

using detail::json;

double control_energy(const std::vector<ControlInput>& controls, const TimeGrid& grid) {
  grid.validate();
  if (static_cast<int>(controls.size()) != grid.size())
    throw std::invalid_argument("control_energy: one control sample per grid point required");
  const double dt = grid.dt();
  double e = 0;
  for (int i = 0; i < grid.n_steps; ++i) {
    const double a = controls[i].ux * controls[i].ux + controls[i].uy * controls[i].uy;
    const double b =
        controls[i + 1].ux * controls[i + 1].ux + controls[i + 1].uy * controls[i + 1].uy;
    e += 0.5 * dt * (a + b);
  }
  return e;
}

double final_deviation(const BlochState& s, const BlochState& target) {
  return (s - target).squaredNorm();
}

std::pair<ControlMetrics, ControlMetrics> control_metrics(const ClosedLoopResult& res,
                                                          const BlochState& target,
                                                          const std::string& split) {
  if (res.plant.empty() || res.predicted.size() != res.plant.size())
    throw std::invalid_argument("control_metrics: incomplete closed-loop result");
  double mse = 0;
  for (std::size_t k = 0; k < res.plant.size(); ++k)
    mse += (res.predicted[k].bloch - res.plant[k]).squaredNorm();
  mse /= 3.0 * static_cast<double>(res.plant.size());
  const double energy = control_energy(res.controls, res.grid);

  ControlMetrics real{"Real", res.label, split, mse, energy, 0, 0};
  real.deviation = final_deviation(res.plant.back(), target);
  real.fidelity = fidelity(res.plant.back(), target);
  ControlMetrics pred{"Pred", res.label, split, mse, energy, 0, 0};
  pred.deviation = final_deviation(res.predicted.back().bloch, target);
  pred.fidelity = fidelity(res.predicted.back().bloch, target);
  return {real, pred};
}

ObservableTrace trace_observables(const std::vector<BlochState>& states, const TimeGrid& grid) {
  if (static_cast<int>(states.size()) != grid.size())
    throw std::invalid_argument("trace_observables: one state per grid point required");
  ObservableTrace out;
  for (int k = 0; k < grid.size(); ++k) {
    const BlochState& s = states[k];
    const auto [p1, p2] = populations(s);
    out.t.push_back(grid.time(k));
    out.purity.push_back(purity(s));
    out.coherence.push_back(s(0));
    out.p1.push_back(p1);
    out.p2.push_back(p2);
  }
  return out;
}

ObservableTrace trace_observables(const Trajectory& tr) {
  std::vector<BlochState> s;
  s.reserve(tr.states.size());
  for (const AugmentedState& a : tr.states) s.push_back(a.bloch);
  return trace_observables(s, tr.grid);
}

void write_observables_csv(std::ostream& os, const ObservableTrace& trace) {
  os << std::setprecision(17) << "t,purity,coherence,p1,p2\n";
  for (std::size_t k = 0; k < trace.t.size(); ++k)
    os << trace.t[k] << ',' << trace.purity[k] << ',' << trace.coherence[k] << ',' << trace.p1[k]
       << ',' << trace.p2[k] << '\n';
}

namespace {

void latent_header(std::ostream& os, long d) {
  os << "traj_id,label,t";
  for (long i = 1; i <= d; ++i) os << ",h_" << i;
  os << '\n';
}

void latent_rows(std::ostream& os, std::size_t id, const std::string& label, const TimeGrid& grid,
                 const std::vector<Vector>& hs) {
  for (std::size_t k = 0; k < hs.size(); ++k) {
    os << id << ',' << label << ',' << grid.time(static_cast<int>(k));
    for (Eigen::Index i = 0; i < hs[k].size(); ++i) os << ',' << hs[k](i);
    os << '\n';
  }
}

}  // namespace

void dump_latents(const AqnodeModel& m, const Dataset& ds, const std::string& label,
                  std::ostream& os) {
  m.validate();
  os << std::setprecision(17);
  latent_header(os, m.latent_dim);
  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const Trajectory& tr = ds.records[r];
    const SignalTrack sig = tr.signals();
    const Vector h0 = encode(m, tr.states.front(), std::span(sig.dy.data(), m.prefix_len));
    latent_rows(os, r, label, tr.grid, rollout(m, h0, tr.grid, sig));
  }
}

void dump_latents(const std::vector<ClosedLoopResult>& runs, const std::string& label,
                  std::ostream& os) {
  os << std::setprecision(17);
  const long d = runs.empty() || runs.front().latents.empty() ? 0 : runs.front().latents.front().size();
  latent_header(os, d);
  for (std::size_t r = 0; r < runs.size(); ++r)
    latent_rows(os, r, label, runs[r].grid, runs[r].latents);
}

namespace {

json control_row_json(const ControlMetrics& c) {
  return {{"mode", c.mode},         {"control", c.controller}, {"split", c.split},
          {"mse", c.traj_mse},      {"energy", c.energy},      {"dev", c.deviation},
          {"fidelity", c.fidelity}};
}

}  // namespace

std::string report_to_json(const Report& report) {
  json mse = json::array();
  for (const MseRow& r : report.mse_rows)
    mse.push_back({{"label", r.label},
                   {"x", r.mse.v[0]},
                   {"y", r.mse.v[1]},
                   {"z", r.mse.v[2]},
                   {"delta", r.mse.v[3]},
                   {"gamma", r.mse.v[4]}});
  json ctl = json::array();
  for (const ControlMetrics& c : report.control_rows) ctl.push_back(control_row_json(c));
  json j = {{"schema_version", 1}, {"kind", "report"}, {"seed", report.seed},
            {"mse", mse},          {"control", ctl}};
  j["config"] = report.config.empty() ? json(nullptr) : json::parse(report.config);
  return j.dump(2);
}

Report report_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("kind", "") != "report" || j.value("schema_version", 0) != 1)
    throw std::runtime_error("not a version-1 report");
  Report r;
  r.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("config").is_null()) r.config = j.at("config").dump();
  for (const json& m : j.at("mse"))
    r.mse_rows.push_back({m.at("label").get<std::string>(),
                          {{m.at("x").get<double>(), m.at("y").get<double>(),
                            m.at("z").get<double>(), m.at("delta").get<double>(),
                            m.at("gamma").get<double>()}}});
  for (const json& c : j.at("control"))
    r.control_rows.push_back({c.at("mode").get<std::string>(), c.at("control").get<std::string>(),
                              c.at("split").get<std::string>(), c.at("mse").get<double>(),
                              c.at("energy").get<double>(), c.at("dev").get<double>(),
                              c.at("fidelity").get<double>()});
  return r;
}

Report read_report(const std::string& json_path) {
  auto is = detail::open_in(json_path);
  std::stringstream ss;
  ss << is.rdbuf();
  return report_from_json(ss.str());
}

void emit_report(const Report& report, const std::string& stem) {
  const std::filesystem::path p(stem);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  {
    auto os = detail::open_out(stem + ".json");
    os << report_to_json(report) << '\n';
  }
  {
    auto os = detail::open_out(stem + "_mse.csv");
    os << std::setprecision(17) << "Split,x,y,z,delta,gamma\n";
    for (const MseRow& r : report.mse_rows)
      os << r.label << ',' << r.mse.v[0] << ',' << r.mse.v[1] << ',' << r.mse.v[2] << ','
         << r.mse.v[3] << ',' << r.mse.v[4] << '\n';
  }
  {
    auto os = detail::open_out(stem + "_control.csv");
    os << std::setprecision(17) << "Mode,Control,Split,MSE,Energy,Dev,Fidelity\n";
    for (const ControlMetrics& c : report.control_rows)
      os << c.mode << ',' << c.controller << ',' << c.split << ',' << c.traj_mse << ','
         << c.energy << ',' << c.deviation << ',' << c.fidelity << '\n';
  }
}

}  // namespace aqnode
