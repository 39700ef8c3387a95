#include "aqnode/cli.hpp"

#include "aqnode/eval.hpp"
#include "aqnode/trainer.hpp"

#include "json_io.hpp"
#include "parallel.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef AQNODE_SOURCE_CONFIG
#define AQNODE_SOURCE_CONFIG "config/defaults.json"
#endif

namespace aqnode::cli {

using detail::json;
namespace fs = std::filesystem;

namespace {

std::array<double, 3> triple(const json& j) { return j.get<std::array<double, 3>>(); }

TimeGrid grid_or(const json& j, const char* key, const TimeGrid& fallback) {
  return j.contains(key) ? detail::grid_from_json(j.at(key)) : fallback;
}

}  // namespace

RunDefaults load_defaults(const std::string& path) {
  auto is = detail::open_in(path);
  RunDefaults d;
  try {
    const json j = json::parse(is);
    if (j.contains("physics")) {
      d.zeta = j["physics"].value("zeta", d.zeta);
      d.kbt = j["physics"].value("kbt", d.kbt);
    }
    if (j.contains("grids")) {
      const json& g = j["grids"];
      d.grids = {grid_or(g, "phase1", d.grids[0]), grid_or(g, "phase2", d.grids[1]),
                 grid_or(g, "phase3", d.grids[2])};
    }
    if (j.contains("datagen")) {
      d.noise_std = j["datagen"].value("noise_std", d.noise_std);
      d.phase3_south_pole_fraction =
          j["datagen"].value("phase3_south_pole_fraction", d.phase3_south_pole_fraction);
    }
    if (j.contains("expert")) {
      const json& e = j["expert"];
      d.expert.lqr_fraction = e.value("lqr_fraction", d.expert.lqr_fraction);
      d.expert.feedback_noise_max = e.value("feedback_noise_max", d.expert.feedback_noise_max);
      d.expert.random_amplitude = e.value("random_amplitude", d.expert.random_amplitude);
      d.expert.random_harmonics = e.value("random_harmonics", d.expert.random_harmonics);
    }
    if (j.contains("pd")) {
      const json& p = j["pd"];
      d.pd.kp_x = p.value("kp_x", d.pd.kp_x);
      d.pd.kp_y = p.value("kp_y", d.pd.kp_y);
      d.pd.kd_x = p.value("kd_x", d.pd.kd_x);
      d.pd.kd_y = p.value("kd_y", d.pd.kd_y);
    }
    if (j.contains("lqr")) {
      const json& l = j["lqr"];
      if (l.contains("q_diag")) {
        const auto q = triple(l["q_diag"]);
        d.lqr.q = Eigen::Vector3d(q[0], q[1], q[2]).asDiagonal();
      }
      if (l.contains("r_diag")) {
        const auto r = l["r_diag"].get<std::array<double, 2>>();
        d.lqr.r = Eigen::Vector2d(r[0], r[1]).asDiagonal();
      }
      if (l.contains("terminal_diag")) {
        const auto t = triple(l["terminal_diag"]);
        d.lqr.terminal = Eigen::Vector3d(t[0], t[1], t[2]).asDiagonal();
      }
      if (l.contains("target")) {
        const auto t = triple(l["target"]);
        d.lqr.target = BlochState(t[0], t[1], t[2]);
      }
    }
    d.expert.lqr = d.lqr;
    if (j.contains("control")) {
      const json& c = j["control"];
      if (c.contains("y0")) {
        const auto y = triple(c["y0"]);
        d.control_y0 = BlochState(y[0], y[1], y[2]);
      }
      d.control_draws = c.value("draws", d.control_draws);
      d.use_true_rates = c.value("use_true_rates", d.use_true_rates);
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("defaults '" + path + "': " + e.what());
  }
  return d;
}

std::string default_config_path() {
  if (const char* env = std::getenv("AQNODE_DEFAULTS"); env != nullptr && *env != '\0') return env;
  return AQNODE_SOURCE_CONFIG;
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Relative output paths land under $AQNODE_OUTPUT_ROOT when it is set.
std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("AQNODE_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string strip_ext(const std::string& path) {
  fs::path p(path);
  if (p.has_extension()) p.replace_extension();
  return p.string();
}

PhaseRegime regime_for(int phase, Split split, const RunDefaults& d) {
  PhaseRegime r = PhaseRegime::make(phase, split);
  r.zeta = d.zeta;
  r.kbt = d.kbt;
  return r;
}

GenerationOptions generation_options(int phase, const RunDefaults& d) {
  GenerationOptions o;
  o.noise_std = d.noise_std;
  if (phase == 3) {
    o.policy = expert_policy_factory(d.expert);
    o.south_pole_fraction = d.phase3_south_pole_fraction;
  }
  return o;
}

SystemParams midpoint(const PhaseRegime& r) {
  SystemParams p;
  p.alpha = 0.5 * (r.alpha.lo + r.alpha.hi);
  p.r = 0.5 * (r.r.lo + r.r.hi);
  p.m_strength = 0.5 * (r.m_strength.lo + r.m_strength.hi);
  p.omega0 = 0.5 * (r.omega0.lo + r.omega0.hi);
  p.zeta = r.zeta;
  p.kbt = r.kbt;
  return p;
}

// Applies "a.b.c=value" onto a JSON object; values parse as JSON when they can.
void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::string slurp(const std::string& path) {
  auto is = detail::open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  auto os = detail::open_out(path);
  os << text;
  if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

// ---- subcommands -------------------------------------------------------

struct GenerateArgs {
  int phase{1};
  std::string split;
  std::size_t n{0};
  std::string out;
  std::uint64_t seed{0};
};

void run_generate(const GenerateArgs& a, const RunDefaults& d, std::ostream& out_stream,
                  std::ostream& log) {
  const Split split = split_from_string(a.split);
  const Dataset ds = generate_dataset(regime_for(a.phase, split, d), a.n, d.grid(a.phase), a.seed,
                                      generation_options(a.phase, d));
  if (a.out.empty()) {
    write_dataset(out_stream, ds);
    return;
  }
  const std::string out = resolve_out(a.out);
  ensure_parent(out);
  write_dataset(out, ds);
  log << "wrote " << ds.records.size() << " trajectories to " << out << '\n';
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  int threads{0};
};

void run_train(const TrainArgs& a, std::ostream& log) {
  json j;
  try {
    j = json::parse(slurp(a.config));
  } catch (const json::exception& e) {
    throw std::runtime_error("config '" + a.config + "': " + e.what());
  }
  for (const std::string& kv : a.overrides) apply_override(j, kv);
  TrainConfig cfg = train_config_from_json(j.dump());
  if (a.threads > 0) cfg.threads = a.threads;
  const std::string out = resolve_out(a.out);
  fs::create_directories(out);
  if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = (fs::path(out) / "checkpoints").string();

  std::ostringstream loss_csv;
  loss_csv << std::setprecision(17) << "epoch,loss\n";
  const TrainResult res = train(cfg, [&](int epoch, double loss) {
    loss_csv << epoch << ',' << loss << '\n';
    log << "epoch " << epoch << "/" << cfg.epochs << " loss " << loss << std::endl;
  });
  save_checkpoint((fs::path(out) / "model.json").string(), res.checkpoint);
  write_text((fs::path(out) / "train_report.json").string(), train_report_to_json(res.report) + "\n");
  write_text((fs::path(out) / "loss.csv").string(), loss_csv.str());

  Report rep;
  rep.seed = cfg.seed;
  rep.config = train_config_to_json(cfg);
  if (res.report.train_mse) rep.mse_rows.push_back({"train", *res.report.train_mse});
  if (res.report.wd_mse) rep.mse_rows.push_back({"wd", *res.report.wd_mse});
  if (res.report.ood_mse) rep.mse_rows.push_back({"ood", *res.report.ood_mse});
  emit_report(rep, (fs::path(out) / "mse").string());
  log << "trained in " << res.report.wall_seconds << " s; model at "
      << (fs::path(out) / "model.json").string() << '\n';
}

struct EvaluateArgs {
  std::string model;
  std::string data;
  std::string out;
  int threads{1};
};

void run_evaluate(const EvaluateArgs& a, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Dataset ds = read_dataset(a.data);
  const ComponentMse mse = evaluate_split(ck.model, ds, a.threads);
  Report rep;
  rep.seed = ds.header.seed;
  rep.config = json{{"model", a.model},
                    {"data", a.data},
                    {"phase", ds.header.regime.phase},
                    {"split", to_string(ds.header.regime.split)},
                    {"train", json::parse(train_config_to_json(ck.config))}}
                   .dump();
  rep.mse_rows.push_back({to_string(ds.header.regime.split), mse});
  const std::string stem = strip_ext(resolve_out(a.out));
  emit_report(rep, stem);
  log << "mse x " << mse.x() << " y " << mse.y() << " z " << mse.z() << " delta " << mse.delta()
      << " gamma " << mse.gamma() << '\n';
}

struct ControlArgs {
  std::string model;
  std::string controller;
  std::string split;
  std::string out;
  int draws{0};
  std::uint64_t seed{0};
  bool at_midpoint{false};
  bool true_rates{false};
  double noise{0.0};
  int threads{1};
};

void write_closed_loop_csv(const std::string& path, const ClosedLoopResult& r) {
  ensure_parent(path);
  auto os = detail::open_out(path);
  os << std::setprecision(17)
     << "t,x,y,z,delta,gamma,x_hat,y_hat,z_hat,delta_hat,gamma_hat,ux,uy,dy,purity,coherence,p1,p2\n";
  for (std::size_t k = 0; k < r.plant.size(); ++k) {
    const BlochState& s = r.plant[k];
    const AugmentedState& a = r.plant_aug[k];
    const AugmentedState& h = r.predicted[k];
    const auto [p1, p2] = populations(s);
    os << r.grid.time(static_cast<int>(k)) << ',' << s(0) << ',' << s(1) << ',' << s(2) << ','
       << a.delta << ',' << a.gamma << ',' << h.bloch(0) << ',' << h.bloch(1) << ','
       << h.bloch(2) << ',' << h.delta << ',' << h.gamma << ',' << r.controls[k].ux << ','
       << r.controls[k].uy << ',' << r.dy[k] << ',' << purity(s) << ',' << s(0) << ',' << p1
       << ',' << p2 << '\n';
  }
}

void run_control(const ControlArgs& a, const RunDefaults& d, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(a.model);
  const AqnodeModel& m = ck.model;
  if (m.signals.mode != SignalMode::kControl)
    throw std::runtime_error("control: model '" + a.model + "' was trained without control inputs");
  const Split split = split_from_string(a.split);
  if (split == Split::kTrain) throw UsageError("control: --split must be wd or ood");
  const PhaseRegime regime = regime_for(3, split, d);
  const TimeGrid grid = d.grid(3);
  const bool true_rates = a.true_rates || d.use_true_rates;

  std::vector<SystemParams> params;
  if (a.at_midpoint) {
    params.push_back(midpoint(regime));
  } else {
    Rng rng(a.seed);
    const int n = a.draws > 0 ? a.draws : d.control_draws;
    for (int i = 0; i < n; ++i) params.push_back(sample_params(regime, rng));
  }
  const AugmentedState y0{d.control_y0, 0.0, 0.0};
  const bool use_pd = a.controller == "pd";

  std::vector<ClosedLoopResult> runs(params.size());
  detail::parallel_for(static_cast<int>(params.size()), a.threads, [&](int i) {
    Controller ctl = PdController{d.pd};
    if (!use_pd) ctl = LqrController{design_lqr(params[i], &m, y0, grid, d.lqr, true_rates)};
    runs[i] = closed_loop_run(params[i], m, ctl, y0, grid, d.lqr.target, a.noise,
                              a.seed + static_cast<std::uint64_t>(i));
  });

  const std::string split_label = split == Split::kWd ? "WD" : "OOD";
  const std::string out = resolve_out(a.out);
  fs::create_directories(out);
  ControlMetrics real_mean{"Real", runs.front().label, split_label};
  ControlMetrics pred_mean{"Pred", runs.front().label, split_label};
  std::ostringstream per_run;
  per_run << std::setprecision(17)
          << "run,alpha,r,m,omega0,mode,control,split,mse,energy,dev,fidelity\n";
  const double w = 1.0 / static_cast<double>(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto [real, pred] = control_metrics(runs[i], d.lqr.target, split_label);
    for (const ControlMetrics* c : {&real, &pred}) {
      const SystemParams& p = params[i];
      per_run << i << ',' << p.alpha << ',' << p.r << ',' << p.m_strength << ',' << p.omega0 << ','
              << c->mode << ',' << c->controller << ',' << c->split << ',' << c->traj_mse << ','
              << c->energy << ',' << c->deviation << ',' << c->fidelity << '\n';
    }
    for (auto [acc, c] : {std::pair{&real_mean, &real}, std::pair{&pred_mean, &pred}}) {
      acc->traj_mse += w * c->traj_mse;
      acc->energy += w * c->energy;
      acc->deviation += w * c->deviation;
      acc->fidelity += w * c->fidelity;
    }
    std::ostringstream name;
    name << "closed_loop_" << i << ".csv";
    write_closed_loop_csv((fs::path(out) / name.str()).string(), runs[i]);
  }
  write_text((fs::path(out) / "runs.csv").string(), per_run.str());
  {
    auto os = detail::open_out((fs::path(out) / "latents.csv").string());
    dump_latents(runs, runs.front().label + "/" + split_label, os);
  }

  Report rep;
  rep.seed = a.seed;
  json cfg = {{"model", a.model},
              {"controller", a.controller},
              {"split", a.split},
              {"draws", params.size()},
              {"midpoint", a.at_midpoint},
              {"true_rates", true_rates},
              {"noise_std", a.noise},
              {"grid", detail::to_json(grid)},
              {"y0", {d.control_y0(0), d.control_y0(1), d.control_y0(2)}},
              {"target", {d.lqr.target(0), d.lqr.target(1), d.lqr.target(2)}},
              {"pd", {d.pd.kp_x, d.pd.kp_y, d.pd.kd_x, d.pd.kd_y}},
              {"lqr_q_diag", {d.lqr.q(0, 0), d.lqr.q(1, 1), d.lqr.q(2, 2)}},
              {"lqr_r_diag", {d.lqr.r(0, 0), d.lqr.r(1, 1)}}};
  json plist = json::array();
  for (const SystemParams& p : params) plist.push_back(detail::to_json(p));
  cfg["params"] = plist;
  rep.config = cfg.dump();
  rep.control_rows = {real_mean, pred_mean};
  emit_report(rep, (fs::path(out) / "report").string());
  log << real_mean.controller << ' ' << split_label << ": fidelity " << real_mean.fidelity
      << " dev " << real_mean.deviation << " energy " << real_mean.energy << " (mean of "
      << runs.size() << ")\n";
}

struct PerturbArgs {
  std::string model;
  std::string eps;
  std::string out;
  std::string data;
  int n{20};
  int trials{1};
  std::uint64_t seed{0};
};

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--eps: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError("--eps: empty list");
  return out;
}

void run_perturb(const PerturbArgs& a, const RunDefaults& d, std::ostream& log) {
  const std::vector<double> eps = parse_list(a.eps);
  const Checkpoint ck = load_checkpoint(a.model);
  Dataset ds;
  if (!a.data.empty()) {
    ds = read_dataset(a.data);
  } else {
    const int phase = ck.config.phase;
    ds = generate_dataset(regime_for(phase, Split::kWd, d), static_cast<std::size_t>(a.n),
                          d.grid(phase), a.seed, generation_options(phase, d));
  }
  Rng rng(a.seed);
  const auto rows = perturbation_study(ck.model, ds, eps, rng, a.trials);

  const std::string stem = strip_ext(resolve_out(a.out));
  ensure_parent(stem);
  {
    auto os = detail::open_out(stem + ".csv");
    os << std::setprecision(17) << 't';
    for (const auto& r : rows) os << ",eps_" << r.eps;
    os << '\n';
    for (std::size_t k = 0; k < rows.front().t.size(); ++k) {
      os << rows.front().t[k];
      for (const auto& r : rows) os << ',' << r.deviation[k];
      os << '\n';
    }
  }
  json j = {{"schema_version", 1},
            {"kind", "perturbation"},
            {"seed", a.seed},
            {"config",
             {{"model", a.model},
              {"data", a.data},
              {"n", ds.records.size()},
              {"trials", a.trials},
              {"phase", ds.header.regime.phase}}}};
  json jr = json::array();
  for (const auto& r : rows) jr.push_back({{"eps", r.eps}, {"t", r.t}, {"deviation", r.deviation}});
  j["rows"] = jr;
  write_text(stem + ".json", j.dump() + "\n");
  for (const auto& r : rows)
    log << "eps " << r.eps << ": deviation t0 " << r.deviation.front() << " T "
        << r.deviation.back() << '\n';
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Augmented latent neural ODE for a dissipative, measured qubit"};
  app.require_subcommand(1);
  std::string defaults_path = default_config_path();
  app.add_option("--defaults", defaults_path, "Physical/controller defaults (JSON)");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate a ground-truth dataset");
  g->add_option("--phase", gen.phase, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  g->add_option("--split", gen.split, "train, wd or ood")
      ->required()
      ->check(CLI::IsMember({"train", "wd", "ood"}));
  g->add_option("--n", gen.n, "Number of trajectories")->required();
  g->add_option("--out", gen.out, "Output NDJSON path (default: standard output)");
  g->add_option("--seed", gen.seed, "Master seed")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model from a JSON config");
  t->add_option("--config", tr.config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--set", tr.overrides, "Config override key=value (dotted keys)");
  t->add_option("--threads", tr.threads, "Worker threads (1 = bitwise reproducible)")
      ->check(CLI::PositiveNumber);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Per-component MSE of a model on a dataset");
  e->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset")->required()->check(CLI::ExistingFile);
  e->add_option("--out", ev.out, "Report path stem")->required();
  e->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);

  ControlArgs ct;
  auto* c = app.add_subcommand("control", "Closed-loop PD or LQR runs on the real plant");
  c->add_option("--model", ct.model, "Control-mode checkpoint")->required()->check(CLI::ExistingFile);
  c->add_option("--controller", ct.controller, "pd or lqr")
      ->required()
      ->check(CLI::IsMember({"pd", "lqr"}));
  c->add_option("--split", ct.split, "wd or ood")->required()->check(CLI::IsMember({"wd", "ood"}));
  c->add_option("--out", ct.out, "Output directory")->required();
  c->add_option("--draws", ct.draws, "Parameter draws (default from the defaults file)");
  c->add_option("--seed", ct.seed, "Seed for parameter draws and measurement noise");
  c->add_flag("--midpoint", ct.at_midpoint, "Single run at the split's interval midpoints");
  c->add_flag("--true-rates", ct.true_rates, "Design the LQR with the analytic rates");
  c->add_option("--noise", ct.noise, "Measurement noise std")->check(CLI::NonNegativeNumber);
  c->add_option("--threads", ct.threads, "Worker threads")->check(CLI::PositiveNumber);

  PerturbArgs pb;
  auto* p = app.add_subcommand("perturb", "Initial-state perturbation study");
  p->add_option("--model", pb.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--eps", pb.eps, "Comma-separated perturbation sizes")->required();
  p->add_option("--out", pb.out, "Output path stem")->required();
  p->add_option("--data", pb.data, "Dataset (default: generated WD set)")->check(CLI::ExistingFile);
  p->add_option("--n", pb.n, "Trajectories when generating")->check(CLI::PositiveNumber);
  p->add_option("--trials", pb.trials, "Perturbations per trajectory")->check(CLI::PositiveNumber);
  p->add_option("--seed", pb.seed, "Seed");

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("aqnode");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& pe) {
    err << "error: " << pe.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*g) {
      run_generate(gen, load_defaults(defaults_path), out, err);
    } else if (*t) {
      run_train(tr, err);
    } else if (*e) {
      run_evaluate(ev, err);
    } else if (*c) {
      run_control(ct, load_defaults(defaults_path), err);
    } else if (*p) {
      run_perturb(pb, load_defaults(defaults_path), err);
    }
  } catch (const UsageError& ue) {
    err << "error: " << ue.what() << '\n';
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  }
  return 0;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace aqnode::cli
