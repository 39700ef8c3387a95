#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqnode/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace aqnode;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("aqnode_trainer_" + name);
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

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.model.latent_dim = 6;
  c.model.hidden = 16;
  c.model.prefix_len = 4;
  c.seed = 5;
  return c;
}

Dataset small_data(std::size_t n, std::uint64_t seed, Split split = Split::kTrain) {
  return generate_dataset(PhaseRegime::make(1, split), n, TimeGrid(0.0, 1.0, 50), seed);
}

// Memorisation run shared by several cases.
const TrainResult& overfit() {
  static const TrainResult res = [] {
    TrainConfig c;
    c.epochs = 300;
    c.batch_size = 2;
    c.learning_rate = 3e-3;
    c.final_learning_rate = 3e-4;
    c.seed = 1;
    const Dataset ds = generate_dataset(PhaseRegime::make(1, Split::kTrain), 8, default_grid(1), 77);
    return train(c, ds, nullptr, nullptr);
  }();
  return res;
}

const Dataset& overfit_data() {
  static const Dataset ds = generate_dataset(PhaseRegime::make(1, Split::kTrain), 8, default_grid(1), 77);
  return ds;
}

}  // namespace

TEST_CASE("config defaults, validation and JSON") {
  const TrainConfig d;
  CHECK(d.epochs == 200);
  CHECK(d.batch_size == 32);
  CHECK(d.learning_rate == 1e-3);
  CHECK(d.weights.kappa == 1.0);
  CHECK(d.weights.beta == 1.0);
  CHECK(d.checkpoint_every == 25);
  CHECK(d.model.prefix_len == 10);
  CHECK_NOTHROW(d.validate());

  TrainConfig c = small_config();
  c.grad_clip = 2.5;
  c.model.signals.mode = SignalMode::kControl;
  c.model.signals.u_scale = 0.05;
  c.train_path = "a.jsonl";
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  CHECK(back.model.signals.mode == SignalMode::kControl);
  CHECK(back.model.signals.u_scale == 0.05);
  CHECK(back.grad_clip == 2.5);

  const TrainConfig partial = train_config_from_json(R"({"epochs": 7, "learning_rate": 0.01})");
  CHECK(partial.epochs == 7);
  CHECK(partial.final_learning_rate == 0.01);
  CHECK(partial.batch_size == 32);

  for (const char* bad : {R"({"epochs": 0})", R"({"batch_size": -1})", R"({"learning_rate": 0})",
                          R"({"phase": 4})", R"({"threads": 0})"})
    CHECK_THROWS(train_config_from_json(bad));
  CHECK_THROWS(train_config_from_json("not json"));
}

TEST_CASE("evaluation oracles") {
  const Dataset ds = small_data(3, 2);
  std::vector<std::vector<AugmentedState>> truth;
  for (const Trajectory& tr : ds.records) truth.push_back(tr.states);
  const ComponentMse zero = evaluate_predictions(truth, ds);
  for (double v : zero.v) CHECK(v == 0.0);

  Dataset up = ds;
  for (Trajectory& tr : up.records)
    for (AugmentedState& s : tr.states) s = {BlochState(0, 0, 1), 0, 0};
  AqnodeModel blank = make_model(small_config().model, 0);
  blank.set_flat_params(Vector::Zero(blank.num_parameters()));
  const ComponentMse e = evaluate_split(blank, up);
  CHECK(e.z() == 1.0);
  CHECK(e.x() == 0.0);
  CHECK(e.y() == 0.0);
  CHECK(e.delta() == 0.0);
  CHECK(e.gamma() == 0.0);
  CHECK(e.max() == 1.0);

  // Hand reduction over trajectories and grid points.
  const AqnodeModel m = make_model(small_config().model, 3);
  const ComponentMse got = evaluate_split(m, ds);
  std::array<double, 5> ref{};
  double count = 0;
  for (const Trajectory& tr : ds.records) {
    const auto pred = predict(m, tr.states.front(), tr.signals());
    for (std::size_t k = 0; k < pred.size(); ++k) {
      for (int c = 0; c < 5; ++c) ref[c] += std::pow(pred[k].vector()(c) - tr.states[k].vector()(c), 2);
      count += 1;
    }
  }
  for (int c = 0; c < 5; ++c) CHECK(got.v[c] == doctest::Approx(ref[c] / count).epsilon(1e-12));
  CHECK(evaluate_split(m, ds, 3).v == got.v);

  CHECK_THROWS_AS(evaluate_predictions({truth[0]}, ds), std::invalid_argument);
}

TEST_CASE("overfitting a handful of trajectories") {
  const TrainResult& res = overfit();
  REQUIRE(res.report.epoch_loss.size() == 300);
  CHECK(res.report.epoch_loss.back() < 1e-3);
  CHECK(res.report.epoch_loss.back() < res.report.epoch_loss.front());
  CHECK(res.report.train_mse->max() < 1e-3);
}

TEST_CASE("training is reproducible and resumable") {
  const TrainConfig c = small_config();
  const Dataset ds = small_data(10, 4);
  const TrainResult a = train(c, ds, nullptr, nullptr);
  const TrainResult b = train(c, ds, nullptr, nullptr);
  CHECK(a.model.flat_params() == b.model.flat_params());
  CHECK(a.report.epoch_loss == b.report.epoch_loss);
  CHECK(train_report_to_json(a.report) == train_report_to_json(b.report));

  TrainConfig other = c;
  other.seed = 6;
  CHECK(train(other, ds, nullptr, nullptr).report.epoch_loss != a.report.epoch_loss);

  // Two epochs, checkpoint, then resume for the third.
  const fs::path dir = scratch_dir("resume");
  TrainConfig first = c;
  first.epochs = 2;
  first.checkpoint_dir = dir.string();
  first.checkpoint_every = 1;
  train(first, ds, nullptr, nullptr);
  CHECK(fs::exists(dir / "epoch_1.json"));
  CHECK(fs::exists(dir / "epoch_2.json"));
  TrainConfig rest = c;
  rest.resume_path = (dir / "epoch_2.json").string();
  const TrainResult resumed = train(rest, ds, nullptr, nullptr);
  CHECK(resumed.model.flat_params() == a.model.flat_params());
  CHECK(resumed.report.epoch_loss == a.report.epoch_loss);

  // Nothing left to do: parameters and losses stay put.
  const fs::path done = scratch_dir("done");
  save_checkpoint((done / "final.json").string(), a.checkpoint);
  TrainConfig again = c;
  again.resume_path = (done / "final.json").string();
  const TrainResult same = train(again, ds, nullptr, nullptr);
  CHECK(same.model.flat_params() == a.model.flat_params());
  CHECK(same.report.epoch_loss == a.report.epoch_loss);
}

TEST_CASE("threaded gradients") {
  TrainConfig c = small_config();
  const Dataset ds = small_data(10, 8);
  const TrainResult serial = train(c, ds, nullptr, nullptr);
  c.threads = 3;
  const TrainResult t1 = train(c, ds, nullptr, nullptr);
  const TrainResult t2 = train(c, ds, nullptr, nullptr);
  CHECK(t1.model.flat_params() == t2.model.flat_params());
  const Vector d = t1.model.flat_params() - serial.model.flat_params();
  CHECK(d.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("learning-rate decay and clipping") {
  TrainConfig c = small_config();
  c.epochs = 5;
  c.final_learning_rate = 1e-5;
  const Dataset ds = small_data(6, 10);
  const TrainResult r = train(c, ds, nullptr, nullptr);
  CHECK(r.checkpoint.adam.lr == doctest::Approx(1e-5));

  c.grad_clip = 1e-12;
  c.final_learning_rate = c.learning_rate;
  c.epochs = 1;
  c.batch_size = 6;
  // With a vanishing clip Adam still moves by about lr per coordinate on step one.
  const TrainResult clipped = train(c, ds, nullptr, nullptr);
  const Vector moved = clipped.model.flat_params() - make_model(c.model, c.seed).flat_params();
  CHECK(moved.cwiseAbs().maxCoeff() <= c.learning_rate * (1 + 1e-6));
}

TEST_CASE("divergence is reported with its location") {
  const TrainConfig c = small_config();
  Dataset ds = small_data(8, 12);
  ds.records[5].states[10].bloch(0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train(c, ds, nullptr, nullptr);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() == 1);
    CHECK(e.batch() >= 0);
    CHECK(e.batch() < 2);
  }
}

TEST_CASE("checkpoints round-trip") {
  const TrainConfig c = small_config();
  const Dataset ds = small_data(6, 14);
  const TrainResult r = train(c, ds, nullptr, nullptr);
  const fs::path dir = scratch_dir("ckpt");
  const std::string path = (dir / "a.json").string();
  save_checkpoint(path, r.checkpoint);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.model.flat_params() == r.checkpoint.model.flat_params());
  CHECK(back.model.latent_dim == r.checkpoint.model.latent_dim);
  CHECK(back.model.prefix_len == r.checkpoint.model.prefix_len);
  CHECK(back.model.encoder.layer_dims() == r.checkpoint.model.encoder.layer_dims());
  CHECK(back.adam.m == r.checkpoint.adam.m);
  CHECK(back.adam.v == r.checkpoint.adam.v);
  CHECK(back.adam.step == r.checkpoint.adam.step);
  CHECK(back.epoch == 3);
  CHECK(back.epoch_loss == r.checkpoint.epoch_loss);
  CHECK(train_config_to_json(back.config) == train_config_to_json(c));
  save_checkpoint((dir / "b.json").string(), back);
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  CHECK(load_model(path).flat_params() == r.model.flat_params());

  std::ofstream(dir / "junk.json") << "{\"kind\": \"report\"}";
  CHECK_THROWS(load_checkpoint((dir / "junk.json").string()));
  CHECK_THROWS(load_checkpoint((dir / "missing.json").string()));

  // Incompatible data is rejected before training.
  TrainConfig wide = c;
  wide.model.prefix_len = 60;
  CHECK_THROWS(train(wide, ds, nullptr, nullptr));
}

TEST_CASE("training from files") {
  const fs::path dir = scratch_dir("files");
  write_dataset((dir / "train.jsonl").string(), small_data(6, 20));
  write_dataset((dir / "wd.jsonl").string(), small_data(3, 21, Split::kWd));
  TrainConfig c = small_config();
  c.train_path = (dir / "train.jsonl").string();
  c.wd_path = (dir / "wd.jsonl").string();
  const TrainResult r = train(c);
  CHECK(r.report.wd_mse.has_value());
  CHECK_FALSE(r.report.ood_mse.has_value());
  c.train_path = (dir / "nope.jsonl").string();
  CHECK_THROWS(train(c));
}

TEST_CASE("perturbation study") {
  const AqnodeModel& m = overfit().model;
  const Dataset& ds = overfit_data();
  Rng rng(3);
  const auto rows = perturbation_study(m, ds, {0.0, 0.05, 0.1, 0.3}, rng, 10);
  REQUIRE(rows.size() == 4);
  REQUIRE(rows[0].deviation.size() == 501);

  double unperturbed0 = 0;
  for (const Trajectory& tr : ds.records) {
    const auto pred = predict(m, tr.states.front(), tr.signals());
    unperturbed0 += (pred.front().vector() - tr.states.front().vector()).norm() / ds.records.size();
  }
  CHECK(rows[0].deviation[0] == doctest::Approx(unperturbed0).epsilon(1e-12));
  CHECK(rows[1].deviation[0] <= rows[2].deviation[0]);
  CHECK(rows[2].deviation[0] <= rows[3].deviation[0]);
  CHECK(rows[0].t.front() == 0.0);
  CHECK(rows[0].t.back() == 5.0);
}
