#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqnode/cli.hpp"
#include "aqnode/eval.hpp"
#include "aqnode/trainer.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace aqnode;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("aqnode_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"--help"}).out.find("generate") != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"generate", "--phase", "1", "--split", "wd", "--n", "1", "--seed", "1", "--bogus"}).code == 1);
  CHECK(run({"generate", "--phase", "7", "--split", "wd", "--n", "1", "--seed", "1"}).code == 1);
  CHECK(run({"generate", "--phase", "1", "--split", "test", "--n", "1", "--seed", "1"}).code == 1);
  CHECK(run({"generate", "--phase", "1", "--split", "wd", "--n", "1"}).code == 1);
  const Outcome missing = run({"train", "--config", "/nonexistent/cfg.json", "--out", "x"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("error") != std::string::npos);
}

TEST_CASE("generate") {
  const fs::path dir = scratch_dir("generate");
  const std::string a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
  const Outcome one = run({"generate", "--phase", "1", "--split", "train", "--n", "1", "--seed", "3", "--out", a});
  CHECK(one.code == 0);
  CHECK(read_dataset(a).records.size() == 1);

  CHECK(run({"generate", "--phase", "1", "--split", "train", "--n", "1", "--seed", "3", "--out", b}).code == 0);
  CHECK(slurp(a) == slurp(b));

  const Outcome piped = run({"generate", "--phase", "1", "--split", "train", "--n", "1", "--seed", "3"});
  CHECK(piped.code == 0);
  CHECK(piped.out == slurp(a));

  const Dataset p2 = [&] {
    const std::string c = (dir / "p2.jsonl").string();
    REQUIRE(run({"generate", "--phase", "2", "--split", "ood", "--n", "3", "--seed", "4", "--out", c}).code == 0);
    return read_dataset(c);
  }();
  CHECK(p2.header.regime.phase == 2);
  CHECK(p2.header.regime.split == Split::kOod);
  CHECK(p2.header.grid.n_steps == 500);

  // Phase 3 data is driven by the expert excitation.
  const std::string c3 = (dir / "p3.jsonl").string();
  REQUIRE(run({"generate", "--phase", "3", "--split", "train", "--n", "4", "--seed", "5", "--out", c3}).code == 0);
  const Dataset p3 = read_dataset(c3);
  CHECK(p3.header.grid.t1 == 1.0);
  bool driven = false;
  for (const Trajectory& tr : p3.records)
    for (const ControlInput& u : tr.controls) driven |= u.ux != 0.0;
  CHECK(driven);
}

TEST_CASE("defaults file") {
  const cli::RunDefaults file = cli::load_defaults(AQNODE_TEST_DEFAULTS);
  const cli::RunDefaults code;
  CHECK(file.zeta == code.zeta);
  CHECK(file.kbt == code.kbt);
  for (int ph = 1; ph <= 3; ++ph) {
    CHECK(file.grid(ph).t0 == code.grid(ph).t0);
    CHECK(file.grid(ph).t1 == code.grid(ph).t1);
    CHECK(file.grid(ph).n_steps == code.grid(ph).n_steps);
  }
  CHECK(file.noise_std == code.noise_std);
  CHECK(file.phase3_south_pole_fraction == code.phase3_south_pole_fraction);
  CHECK(file.expert.lqr_fraction == code.expert.lqr_fraction);
  CHECK(file.expert.feedback_noise_max == code.expert.feedback_noise_max);
  CHECK(file.expert.random_amplitude == code.expert.random_amplitude);
  CHECK(file.expert.random_harmonics == code.expert.random_harmonics);
  CHECK(file.pd.kp_x == code.pd.kp_x);
  CHECK(file.pd.kp_y == code.pd.kp_y);
  CHECK(file.pd.kd_x == code.pd.kd_x);
  CHECK(file.pd.kd_y == code.pd.kd_y);
  CHECK(file.lqr.q == code.lqr.q);
  CHECK(file.lqr.r == code.lqr.r);
  CHECK(file.lqr.terminal == code.lqr.terminal);
  CHECK(file.lqr.target == code.lqr.target);
  CHECK(file.control_y0 == code.control_y0);
  CHECK(file.control_draws == code.control_draws);
  CHECK(file.use_true_rates == code.use_true_rates);

  // An override file changes the simulated physics.
  const fs::path dir = scratch_dir("defaults");
  write(dir / "d.json", R"({"physics": {"zeta": 0.5}})");
  const std::string x = (dir / "x.jsonl").string(), y = (dir / "y.jsonl").string();
  REQUIRE(run({"generate", "--phase", "1", "--split", "wd", "--n", "1", "--seed", "1", "--out", x}).code == 0);
  REQUIRE(run({"--defaults", (dir / "d.json").string(), "generate", "--phase", "1", "--split", "wd",
               "--n", "1", "--seed", "1", "--out", y})
              .code == 0);
  CHECK(read_dataset(x).records[0].params.zeta == 0.9);
  CHECK(read_dataset(y).records[0].params.zeta == 0.5);
  CHECK_THROWS(cli::load_defaults((dir / "none.json").string()));
}

TEST_CASE("train, evaluate and perturb") {
  const fs::path dir = scratch_dir("train");
  const std::string tr = (dir / "train.jsonl").string(), wd = (dir / "wd.jsonl").string();
  REQUIRE(run({"generate", "--phase", "1", "--split", "train", "--n", "4", "--seed", "1", "--out", tr}).code == 0);
  REQUIRE(run({"generate", "--phase", "1", "--split", "wd", "--n", "2", "--seed", "2", "--out", wd}).code == 0);
  write(dir / "cfg.json", R"({"phase": 1, "train_path": ")" + tr + R"(", "wd_path": ")" + wd +
                              R"(", "epochs": 2, "batch_size": 2, "seed": 3,
                              "model": {"latent_dim": 4, "hidden": 8, "prefix_len": 5}})");
  const std::string out1 = (dir / "run1").string();
  const std::vector<std::string> files{"model.json", "train_report.json", "loss.csv", "mse.json",
                                       "mse_mse.csv"};
  REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--out", out1}).code == 0);
  std::vector<std::string> first;
  for (const std::string& f : files) {
    CHECK(fs::exists(fs::path(out1) / f));
    first.push_back(slurp(fs::path(out1) / f));
  }
  REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--out", out1}).code == 0);
  for (std::size_t i = 0; i < files.size(); ++i) {
    CAPTURE(files[i]);
    CHECK(slurp(fs::path(out1) / files[i]) == first[i]);
  }
  CHECK(fs::exists(fs::path(out1) / "checkpoints" / "epoch_2.json"));
  CHECK(load_checkpoint((fs::path(out1) / "model.json").string()).epoch == 2);

  const std::string out3 = (dir / "run3").string();
  REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--out", out3, "--set", "epochs=3",
               "--set", "model.hidden=6"})
              .code == 0);
  const Checkpoint ck3 = load_checkpoint((fs::path(out3) / "model.json").string());
  CHECK(ck3.epoch == 3);
  CHECK(ck3.model.encoder.layer_dims()[1] == 6);
  CHECK(run({"train", "--config", (dir / "cfg.json").string(), "--out", out3, "--set", "epochs"}).code == 1);

  const std::string stem = (dir / "eval" / "wd").string();
  REQUIRE(run({"evaluate", "--model", out1 + "/model.json", "--data", wd, "--out", stem}).code == 0);
  const Report rep = read_report(stem + ".json");
  REQUIRE(rep.mse_rows.size() == 1);
  CHECK(rep.seed == 2);
  const ComponentMse direct = evaluate_split(load_model(out1 + "/model.json"), read_dataset(wd));
  CHECK(rep.mse_rows[0].mse.v == direct.v);
  CHECK(rep.config.find("\"epochs\":2") != std::string::npos);

  write(dir / "junk.jsonl", "not a dataset\n");
  CHECK(run({"evaluate", "--model", out1 + "/model.json", "--data", (dir / "junk.jsonl").string(),
             "--out", stem})
            .code == 2);

  const std::string ps = (dir / "perturb").string();
  REQUIRE(run({"perturb", "--model", out1 + "/model.json", "--eps", "0.05,0.1,0.3", "--out", ps,
               "--data", wd, "--trials", "2", "--seed", "4"})
              .code == 0);
  CHECK(fs::exists(ps + ".csv"));
  CHECK(fs::exists(ps + ".json"));
  const std::string ps2 = (dir / "perturb2").string();
  REQUIRE(run({"perturb", "--model", out1 + "/model.json", "--eps", "0.05,0.1,0.3", "--out", ps2,
               "--data", wd, "--trials", "2", "--seed", "4"})
              .code == 0);
  CHECK(slurp(ps + ".csv") == slurp(ps2 + ".csv"));

  // Filtering models cannot drive the control loop.
  CHECK(run({"control", "--model", out1 + "/model.json", "--controller", "pd", "--split", "wd",
             "--out", (dir / "ctl").string()})
            .code != 0);
}

TEST_CASE("control smoke run") {
  const fs::path dir = scratch_dir("control");
  const std::string tr = (dir / "train.jsonl").string();
  REQUIRE(run({"generate", "--phase", "3", "--split", "train", "--n", "4", "--seed", "1", "--out", tr}).code == 0);
  write(dir / "cfg.json", R"({"phase": 3, "train_path": ")" + tr + R"(", "epochs": 1, "batch_size": 4,
                              "model": {"latent_dim": 4, "hidden": 8, "prefix_len": 5,
                                        "signals": {"mode": "control", "u_scale": 0.05}}})");
  REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "m").string()}).code == 0);
  const std::string model = (dir / "m" / "model.json").string();
  const std::string out = (dir / "lqr").string();
  const Outcome o = run({"control", "--model", model, "--controller", "lqr", "--split", "wd", "--out",
                         out, "--midpoint"});
  REQUIRE(o.code == 0);
  for (const char* f : {"closed_loop_0.csv", "runs.csv", "latents.csv", "report.json", "report_control.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(fs::path(out) / f));
  }
  const Report rep = read_report(out + "/report.json");
  REQUIRE(rep.control_rows.size() == 2);
  CHECK(rep.control_rows[0].controller == "LQR");
  CHECK(rep.control_rows[0].split == "WD");
  CHECK(rep.control_rows[0].energy > 0.0);

  const std::string pd = (dir / "pd").string();
  REQUIRE(run({"control", "--model", model, "--controller", "pd", "--split", "ood", "--out", pd,
               "--draws", "2", "--seed", "3"})
              .code == 0);
  const std::string pd2 = (dir / "pd2").string();
  REQUIRE(run({"control", "--model", model, "--controller", "pd", "--split", "ood", "--out", pd2,
               "--draws", "2", "--seed", "3"})
              .code == 0);
  CHECK(slurp(pd + "/runs.csv") == slurp(pd2 + "/runs.csv"));
  CHECK(fs::exists(fs::path(pd) / "closed_loop_1.csv"));
  CHECK(run({"control", "--model", model, "--controller", "mpc", "--split", "wd", "--out", pd}).code == 1);
}

TEST_CASE("output root") {
  const fs::path dir = scratch_dir("root");
  ::setenv("AQNODE_OUTPUT_ROOT", dir.c_str(), 1);
  const Outcome o = run({"generate", "--phase", "1", "--split", "wd", "--n", "1", "--seed", "1", "--out",
                         "nested/d.jsonl"});
  ::unsetenv("AQNODE_OUTPUT_ROOT");
  CHECK(o.code == 0);
  CHECK(fs::exists(dir / "nested" / "d.jsonl"));
}

TEST_CASE("checked-in phase configs") {
  const fs::path cfg_dir = fs::path(AQNODE_TEST_DEFAULTS).parent_path();
  for (int phase : {1, 2, 3}) {
    const TrainConfig c = load_train_config((cfg_dir / ("phase" + std::to_string(phase) + ".json")).string());
    CHECK(c.phase == phase);
    CHECK(c.learning_rate == doctest::Approx(1e-3));
    CHECK(c.final_learning_rate == doctest::Approx(1e-4));
    CHECK(c.model.signals.mode == (phase == 3 ? SignalMode::kControl : SignalMode::kFiltering));
    CHECK(c.epochs == (phase == 3 ? 100 : 200));
  }
}
