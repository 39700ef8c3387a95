// Augmented latent neural ODE: encoder -> latent ODE driven by sampled
// exogenous signals -> decoder onto [x, y, z, delta, gamma].
#pragma once

#include "aqnode/dynamics.hpp"
#include "aqnode/integrate.hpp"
#include "aqnode/nn.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace aqnode {

enum class SignalMode {
  kFiltering,  // dynamics input [h, t, dY]
  kControl,    // dynamics input [h, t, u_x, u_y, dY]
};

std::string to_string(SignalMode mode);
SignalMode signal_mode_from_string(const std::string& name);

/// Which exogenous inputs the latent dynamics receive and their fixed
/// input scaling.
struct SignalSpec {
  SignalMode mode{SignalMode::kFiltering};
  double time_scale{1.0};
  double dy_scale{1.0};
  double u_scale{1.0};

  int width() const { return mode == SignalMode::kFiltering ? 2 : 4; }
};

/// Exogenous samples on a grid, held constant over each step.
struct SignalTrack {
  TimeGrid grid;
  std::vector<double> dy;
  std::vector<double> ux;
  std::vector<double> uy;

  void validate() const;
};

struct LossWeights {
  double kappa{1.0};
  double beta{1.0};

  void validate() const;
};

struct ModelConfig {
  int latent_dim{16};
  int hidden{64};
  int prefix_len{10};
  SignalSpec signals{};
};

struct AqnodeModel {
  MlpParams encoder;
  MlpParams dynamics;
  MlpParams decoder;
  int latent_dim{0};
  int prefix_len{0};
  SignalSpec signals{};

  long num_parameters() const { return encoder.size() + dynamics.size() + decoder.size(); }
  /// [encoder | dynamics | decoder]
  Vector flat_params() const;
  void set_flat_params(const Vector& flat);
  void validate() const;
};

/// Builds the three networks with one tanh hidden layer of `hidden` units each.
AqnodeModel make_model(const ModelConfig& cfg, std::uint64_t seed);

/// Builds a model from explicit layer dims (each net validated against the
/// latent / prefix / signal contract).
AqnodeModel make_model(std::vector<int> encoder_dims, std::vector<int> dynamics_dims,
                       std::vector<int> decoder_dims, int prefix_len, SignalSpec signals,
                       std::uint64_t seed);

Vector encode(const AqnodeModel& m, const AugmentedState& y0, std::span<const double> dy_prefix);

/// Latent trajectory on every grid point.
std::vector<Vector> rollout(const AqnodeModel& m, const Vector& h0, const TimeGrid& grid,
                            const SignalTrack& signals);

/// Advances the latent state one RK4 step with the given held signals.
Vector latent_step(const AqnodeModel& m, const Vector& h, double t, double dt, double ux,
                   double uy, double dy, long step = -1);

std::vector<AugmentedState> decode_trajectory(const AqnodeModel& m,
                                              const std::vector<Vector>& latents);

/// encode + rollout + decode.
std::vector<AugmentedState> predict(const AqnodeModel& m, const AugmentedState& y0,
                                    const SignalTrack& signals);

struct LossParts {
  double total{0};
  double state{0};
  double param{0};
};

LossParts loss(const std::vector<AugmentedState>& pred, const std::vector<AugmentedState>& truth,
               const LossWeights& w);

struct GradientResult {
  LossParts loss;
  Vector grad;          // [encoder | dynamics | decoder]
  double time_adjoint;  // dL/dt accumulated through the explicit time input
};

/// Loss gradient with respect to every model parameter via a backward adjoint
/// sweep over the stored forward grid states.
GradientResult adjoint_gradients(const AqnodeModel& m, const AugmentedState& y0,
                                 const SignalTrack& signals,
                                 const std::vector<AugmentedState>& truth, const LossWeights& w);

/// One supervised instance for gradient checking.
struct GradCase {
  AugmentedState y0;
  SignalTrack signals;
  std::vector<AugmentedState> truth;
  LossWeights weights;
};

/// Mean loss and mean gradient over cases that share one grid. Each case is
/// a column of the same matrix sweep, so the reduction order is fixed.
GradientResult batch_gradients(const AqnodeModel& m, std::span<const GradCase* const> cases);

/// Loss of `m` on `c`.
double case_loss(const AqnodeModel& m, const GradCase& c);

/// Worst per-parameter relative error between the adjoint gradient and
/// central differences with step `fd_step`. Components whose magnitudes
/// both fall below `abs_floor` count as agreeing.
double grad_check(const AqnodeModel& m, const GradCase& c, double fd_step,
                  double abs_floor = 1e-8);

}  // namespace aqnode
