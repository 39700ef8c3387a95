// Mini-batched Adam training over generated datasets, checkpoints, and the
// WD / OOD / perturbation evaluation hooks.
#pragma once

#include "aqnode/datagen.hpp"
#include "aqnode/model.hpp"
#include "aqnode/nn.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace aqnode {

struct TrainConfig {
  int phase{1};
  std::string train_path;
  std::string wd_path;
  std::string ood_path;
  int epochs{200};
  int batch_size{32};
  double learning_rate{1e-3};
  double final_learning_rate{1e-3};  // cosine decay target; equal to learning_rate for none
  double grad_clip{0.0};             // global-norm clip, 0 disables
  LossWeights weights{};
  ModelConfig model{};
  std::uint64_t seed{0};
  int checkpoint_every{25};
  std::string checkpoint_dir;        // empty: no periodic checkpoints
  std::string resume_path;           // empty: fresh start
  int threads{1};

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);

/// Per-component mean squared error {x, y, z, delta, gamma}.
struct ComponentMse {
  std::array<double, 5> v{};

  double x() const { return v[0]; }
  double y() const { return v[1]; }
  double z() const { return v[2]; }
  double delta() const { return v[3]; }
  double gamma() const { return v[4]; }
  double max() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::optional<ComponentMse> train_mse;
  std::optional<ComponentMse> wd_mse;
  std::optional<ComponentMse> ood_mse;
  double wall_seconds{0};
  std::uint64_t seed{0};
  TrainConfig config;
};

std::string train_report_to_json(const TrainReport& r);

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

struct Checkpoint {
  int schema_version{1};
  AqnodeModel model;
  AdamState adam;
  int epoch{0};
  std::uint64_t seed{0};
  std::vector<double> epoch_loss;
  TrainConfig config;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);
AqnodeModel load_model(const std::string& path);

/// Called after every epoch with (epoch index from 1, mean training loss).
using EpochHook = std::function<void(int, double)>;

struct TrainResult {
  AqnodeModel model;
  TrainReport report;
  Checkpoint checkpoint;
};

/// Trains on in-memory datasets; `wd` / `ood` are only evaluated.
TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* wd,
                  const Dataset* ood, const EpochHook& hook = {});

/// Loads the datasets named in the config and trains.
TrainResult train(const TrainConfig& cfg, const EpochHook& hook = {});

/// Supervised cases for every record of a dataset.
std::vector<GradCase> make_cases(const Dataset& ds, const LossWeights& w = {});

ComponentMse evaluate_split(const AqnodeModel& m, const Dataset& ds, int threads = 1);

/// Same reduction against externally supplied predictions.
ComponentMse evaluate_predictions(const std::vector<std::vector<AugmentedState>>& pred,
                                  const Dataset& ds);

struct PerturbationRow {
  double eps{0};
  std::vector<double> t;
  std::vector<double> deviation;  // mean ||prediction - truth|| per grid point
};

/// For each eps, re-encodes y0 + eps * (random unit direction) and rolls out
/// against the unperturbed truth and measurement record.
std::vector<PerturbationRow> perturbation_study(const AqnodeModel& m, const Dataset& ds,
                                                const std::vector<double>& eps_list, Rng& rng,
                                                int trials = 1);

}  // namespace aqnode
