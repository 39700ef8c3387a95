#include "aqnode/trainer.hpp"

#include "json_io.hpp"
#include "parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <sstream>

namespace aqnode {

using detail::json;

void TrainConfig::validate() const {
  if (phase < 1 || phase > 3) throw std::invalid_argument("TrainConfig: phase must be 1, 2 or 3");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0) || !(final_learning_rate > 0))
    throw std::invalid_argument("TrainConfig: learning rates must be positive");
  if (grad_clip < 0) throw std::invalid_argument("TrainConfig: grad_clip must be >= 0");
  if (checkpoint_every < 0) throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 0");
  if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
  if (model.latent_dim < 1 || model.hidden < 1 || model.prefix_len < 0)
    throw std::invalid_argument("TrainConfig: bad model dims");
  weights.validate();
}

namespace {

json config_json(const TrainConfig& c) {
  return {{"phase", c.phase},
          {"train_path", c.train_path},
          {"wd_path", c.wd_path},
          {"ood_path", c.ood_path},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"final_learning_rate", c.final_learning_rate},
          {"grad_clip", c.grad_clip},
          {"weights", {{"kappa", c.weights.kappa}, {"beta", c.weights.beta}}},
          {"model",
           {{"latent_dim", c.model.latent_dim},
            {"hidden", c.model.hidden},
            {"prefix_len", c.model.prefix_len},
            {"signals", detail::to_json(c.model.signals)}}},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"checkpoint_dir", c.checkpoint_dir},
          {"resume_path", c.resume_path},
          {"threads", c.threads}};
}

// Missing keys keep their defaults so config files can be partial.
TrainConfig config_from(const json& j) {
  TrainConfig c;
  c.phase = j.value("phase", c.phase);
  c.train_path = j.value("train_path", c.train_path);
  c.wd_path = j.value("wd_path", c.wd_path);
  c.ood_path = j.value("ood_path", c.ood_path);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.final_learning_rate = j.value("final_learning_rate", c.learning_rate);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    c.weights.kappa = w.value("kappa", c.weights.kappa);
    c.weights.beta = w.value("beta", c.weights.beta);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.model.latent_dim = m.value("latent_dim", c.model.latent_dim);
    c.model.hidden = m.value("hidden", c.model.hidden);
    c.model.prefix_len = m.value("prefix_len", c.model.prefix_len);
    if (m.contains("signals")) {
      const json& s = m.at("signals");
      SignalSpec& spec = c.model.signals;
      if (s.contains("mode")) spec.mode = signal_mode_from_string(s.at("mode").get<std::string>());
      spec.time_scale = s.value("time_scale", spec.time_scale);
      spec.dy_scale = s.value("dy_scale", spec.dy_scale);
      spec.u_scale = s.value("u_scale", spec.u_scale);
    }
  }
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
  c.resume_path = j.value("resume_path", c.resume_path);
  c.threads = j.value("threads", c.threads);
  return c;
}

json mse_json(const ComponentMse& m) {
  return {{"x", m.v[0]}, {"y", m.v[1]}, {"z", m.v[2]}, {"delta", m.v[3]}, {"gamma", m.v[4]}};
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) { return config_json(cfg).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c = config_from(json::parse(text));
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  auto is = detail::open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return train_config_from_json(ss.str());
  } catch (const json::exception& e) {
    throw std::runtime_error("config '" + path + "': " + e.what());
  }
}

double ComponentMse::max() const { return *std::max_element(v.begin(), v.end()); }

std::string train_report_to_json(const TrainReport& r) {
  json j = {{"schema_version", 1},
            {"kind", "train_report"},
            {"seed", r.seed},
            {"epoch_loss", r.epoch_loss},
            {"config", config_json(r.config)}};
  json mse = json::object();
  if (r.train_mse) mse["train"] = mse_json(*r.train_mse);
  if (r.wd_mse) mse["wd"] = mse_json(*r.wd_mse);
  if (r.ood_mse) mse["ood"] = mse_json(*r.ood_mse);
  j["mse"] = mse;
  return j.dump(2);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const AqnodeModel& m = ck.model;
  json j = {
      {"schema_version", ck.schema_version},
      {"kind", "checkpoint"},
      {"architecture",
       {{"encoder", m.encoder.layer_dims()},
        {"dynamics", m.dynamics.layer_dims()},
        {"decoder", m.decoder.layer_dims()},
        {"latent_dim", m.latent_dim},
        {"prefix_len", m.prefix_len}}},
      {"signal_spec", detail::to_json(m.signals)},
      {"params",
       {{"encoder", detail::to_json(m.encoder.params())},
        {"dynamics", detail::to_json(m.dynamics.params())},
        {"decoder", detail::to_json(m.decoder.params())}}},
      {"optimizer",
       {{"step", ck.adam.step},
        {"lr", ck.adam.lr},
        {"beta1", ck.adam.beta1},
        {"beta2", ck.adam.beta2},
        {"eps", ck.adam.eps},
        {"m", detail::to_json(ck.adam.m)},
        {"v", detail::to_json(ck.adam.v)}}},
      {"training", {{"epoch", ck.epoch}, {"seed", ck.seed}, {"epoch_loss", ck.epoch_loss}}},
      {"config", config_json(ck.config)}};
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto os = detail::open_out(path);
  os << j.dump() << '\n';
  if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  auto is = detail::open_in(path);
  try {
    const json j = json::parse(is);
    Checkpoint ck;
    ck.schema_version = j.at("schema_version").get<int>();
    if (ck.schema_version != 1 || j.value("kind", "") != "checkpoint")
      throw std::runtime_error("unsupported checkpoint schema");
    const json& a = j.at("architecture");
    ck.model = make_model(a.at("encoder").get<std::vector<int>>(),
                          a.at("dynamics").get<std::vector<int>>(),
                          a.at("decoder").get<std::vector<int>>(), a.at("prefix_len").get<int>(),
                          detail::signal_spec_from_json(j.at("signal_spec")), 0);
    const json& p = j.at("params");
    ck.model.encoder.set_params(detail::vector_from_json(p.at("encoder")));
    ck.model.dynamics.set_params(detail::vector_from_json(p.at("dynamics")));
    ck.model.decoder.set_params(detail::vector_from_json(p.at("decoder")));
    const json& o = j.at("optimizer");
    ck.adam.step = o.at("step").get<long>();
    ck.adam.lr = o.at("lr").get<double>();
    ck.adam.beta1 = o.at("beta1").get<double>();
    ck.adam.beta2 = o.at("beta2").get<double>();
    ck.adam.eps = o.at("eps").get<double>();
    ck.adam.m = detail::vector_from_json(o.at("m"));
    ck.adam.v = detail::vector_from_json(o.at("v"));
    if (ck.adam.m.size() != ck.model.num_parameters() || ck.adam.v.size() != ck.adam.m.size())
      throw std::runtime_error("optimizer state does not match the parameter count");
    const json& t = j.at("training");
    ck.epoch = t.at("epoch").get<int>();
    ck.seed = t.at("seed").get<std::uint64_t>();
    ck.epoch_loss = t.at("epoch_loss").get<std::vector<double>>();
    ck.config = config_from(j.at("config"));
    return ck;
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint '" + path + "': " + e.what());
  }
}

AqnodeModel load_model(const std::string& path) { return load_checkpoint(path).model; }

std::vector<GradCase> make_cases(const Dataset& ds, const LossWeights& w) {
  std::vector<GradCase> out;
  out.reserve(ds.records.size());
  for (const Trajectory& tr : ds.records) out.push_back({tr.states.front(), tr.signals(), tr.states, w});
  return out;
}

namespace {

void check_compatible(const AqnodeModel& m, const Dataset& ds, const char* where) {
  m.validate();
  if (ds.records.empty()) throw std::invalid_argument(std::string(where) + ": empty dataset");
  if (ds.header.grid.size() < m.prefix_len)
    throw std::invalid_argument(std::string(where) + ": grid shorter than the encoder prefix");
  for (const Trajectory& tr : ds.records)
    if (static_cast<int>(tr.states.size()) != ds.header.grid.size())
      throw std::invalid_argument(std::string(where) + ": record length differs from the header grid");
}

GradientResult threaded_gradients(const AqnodeModel& m, const std::vector<const GradCase*>& batch,
                                  int threads) {
  const int nb = static_cast<int>(batch.size());
  const int chunks = std::clamp(threads, 1, nb);
  if (chunks == 1) return batch_gradients(m, batch);
  std::vector<GradientResult> parts(chunks);
  std::vector<int> bounds(chunks + 1);
  for (int c = 0; c <= chunks; ++c) bounds[c] = static_cast<int>(static_cast<long>(nb) * c / chunks);
  detail::parallel_for(chunks, chunks, [&](int c) {
    parts[c] = batch_gradients(
        m, std::span(batch.data() + bounds[c], static_cast<std::size_t>(bounds[c + 1] - bounds[c])));
  });
  GradientResult out;
  out.grad = Vector::Zero(m.num_parameters());
  out.time_adjoint = 0;
  for (int c = 0; c < chunks; ++c) {
    const double w = static_cast<double>(bounds[c + 1] - bounds[c]) / nb;
    out.grad += w * parts[c].grad;
    out.loss.total += w * parts[c].loss.total;
    out.loss.state += w * parts[c].loss.state;
    out.loss.param += w * parts[c].loss.param;
    out.time_adjoint += parts[c].time_adjoint;
  }
  return out;
}

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.epochs <= 1 || cfg.final_learning_rate == cfg.learning_rate) return cfg.learning_rate;
  const double frac = static_cast<double>(epoch - 1) / (cfg.epochs - 1);
  return cfg.final_learning_rate +
         0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* wd,
                  const Dataset* ood, const EpochHook& hook) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();

  Checkpoint ck;
  if (!cfg.resume_path.empty()) {
    ck = load_checkpoint(cfg.resume_path);
  } else {
    ck.model = make_model(cfg.model, cfg.seed);
    ck.adam = AdamState(ck.model.num_parameters(), cfg.learning_rate);
  }
  ck.seed = cfg.seed;
  ck.config = cfg;
  AqnodeModel& model = ck.model;
  check_compatible(model, train_set, "train");

  const std::vector<GradCase> cases = make_cases(train_set, cfg.weights);
  const int n = static_cast<int>(cases.size());
  std::vector<int> order(n);
  Vector params = model.flat_params();

  for (int epoch = ck.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    // Each epoch's shuffle depends only on (seed, epoch) so resumed runs line up.
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    Rng rng(seq);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    ck.adam.lr = scheduled_lr(cfg, epoch);

    double loss_sum = 0;
    std::vector<const GradCase*> batch;
    for (int start = 0, b = 0; start < n; start += cfg.batch_size, ++b) {
      const int stop = std::min(n, start + cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + stop);
      std::sort(idx.begin(), idx.end());
      batch.clear();
      for (int i : idx) batch.push_back(&cases[i]);
      GradientResult g;
      try {
        g = threaded_gradients(model, batch, cfg.threads);
      } catch (const IntegrationError& e) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b) + ": " + e.what(),
                            epoch, b);
      }
      if (!std::isfinite(g.loss.total) || !g.grad.allFinite())
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b),
                            epoch, b);
      if (cfg.grad_clip > 0) {
        const double norm = g.grad.norm();
        if (norm > cfg.grad_clip) g.grad *= cfg.grad_clip / norm;
      }
      adam_step(ck.adam, params, g.grad);
      model.set_flat_params(params);
      loss_sum += g.loss.total * static_cast<double>(stop - start);
    }
    const double epoch_loss = loss_sum / n;
    ck.epoch_loss.push_back(epoch_loss);
    ck.epoch = epoch;
    if (hook) hook(epoch, epoch_loss);
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)) {
      std::ostringstream name;
      name << "epoch_" << epoch << ".json";
      save_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / name.str()).string(), ck);
    }
  }

  TrainResult res;
  res.report.epoch_loss = ck.epoch_loss;
  res.report.seed = cfg.seed;
  res.report.config = cfg;
  res.report.train_mse = evaluate_split(model, train_set, cfg.threads);
  if (wd != nullptr) res.report.wd_mse = evaluate_split(model, *wd, cfg.threads);
  if (ood != nullptr) res.report.ood_mse = evaluate_split(model, *ood, cfg.threads);
  res.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  res.model = model;
  res.checkpoint = std::move(ck);
  return res;
}

TrainResult train(const TrainConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  if (cfg.train_path.empty()) throw std::invalid_argument("train: config names no training set");
  const Dataset train_set = read_dataset(cfg.train_path);
  std::optional<Dataset> wd, ood;
  if (!cfg.wd_path.empty()) wd = read_dataset(cfg.wd_path);
  if (!cfg.ood_path.empty()) ood = read_dataset(cfg.ood_path);
  return train(cfg, train_set, wd ? &*wd : nullptr, ood ? &*ood : nullptr, hook);
}

ComponentMse evaluate_predictions(const std::vector<std::vector<AugmentedState>>& pred,
                                  const Dataset& ds) {
  if (pred.size() != ds.records.size())
    throw std::invalid_argument("evaluate_predictions: one prediction per record required");
  ComponentMse out;
  std::size_t count = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) {
    const auto& truth = ds.records[r].states;
    if (pred[r].size() != truth.size())
      throw std::invalid_argument("evaluate_predictions: prediction length differs from record");
    for (std::size_t k = 0; k < truth.size(); ++k) {
      const Eigen::Matrix<double, 5, 1> d = pred[r][k].vector() - truth[k].vector();
      for (int c = 0; c < 5; ++c) out.v[c] += d(c) * d(c);
    }
    count += truth.size();
  }
  if (count > 0)
    for (double& x : out.v) x /= static_cast<double>(count);
  return out;
}

ComponentMse evaluate_split(const AqnodeModel& m, const Dataset& ds, int threads) {
  check_compatible(m, ds, "evaluate_split");
  std::vector<std::vector<AugmentedState>> pred(ds.records.size());
  detail::parallel_for(static_cast<int>(pred.size()), threads, [&](int i) {
    const Trajectory& tr = ds.records[i];
    pred[i] = predict(m, tr.states.front(), tr.signals());
  });
  return evaluate_predictions(pred, ds);
}

std::vector<PerturbationRow> perturbation_study(const AqnodeModel& m, const Dataset& ds,
                                                const std::vector<double>& eps_list, Rng& rng,
                                                int trials) {
  check_compatible(m, ds, "perturbation_study");
  if (trials < 1) throw std::invalid_argument("perturbation_study: trials must be >= 1");
  const TimeGrid& grid = ds.header.grid;
  std::vector<PerturbationRow> rows;
  for (double eps : eps_list) {
    if (!(eps >= 0)) throw std::invalid_argument("perturbation_study: eps must be >= 0");
    PerturbationRow row;
    row.eps = eps;
    row.deviation.assign(grid.size(), 0.0);
    for (int k = 0; k < grid.size(); ++k) row.t.push_back(grid.time(k));
    for (const Trajectory& tr : ds.records) {
      const SignalTrack sig = tr.signals();
      for (int trial = 0; trial < trials; ++trial) {
        const AugmentedState y0 = perturb_initial(tr.states.front(), eps, rng);
        const auto pred = predict(m, y0, sig);
        for (int k = 0; k < grid.size(); ++k)
          row.deviation[k] += (pred[k].vector() - tr.states[k].vector()).norm();
      }
    }
    const double denom = static_cast<double>(ds.records.size()) * trials;
    for (double& d : row.deviation) d /= denom;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace aqnode
