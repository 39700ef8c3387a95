#include "aqnode/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace aqnode {

std::string to_string(SignalMode mode) {
  return mode == SignalMode::kFiltering ? "filtering" : "control";
}

SignalMode signal_mode_from_string(const std::string& name) {
  if (name == "filtering") return SignalMode::kFiltering;
  if (name == "control") return SignalMode::kControl;
  throw std::invalid_argument("unknown signal mode '" + name + "'");
}

void SignalTrack::validate() const {
  grid.validate();
  const auto n = static_cast<std::size_t>(grid.size());
  if (dy.size() != n || ux.size() != n || uy.size() != n)
    throw std::invalid_argument("SignalTrack: sample count must equal grid point count");
}

void LossWeights::validate() const {
  if (kappa < 0 || beta < 0 || (kappa == 0 && beta == 0))
    throw std::invalid_argument("LossWeights: kappa, beta must be >= 0 and not both 0");
}

Vector AqnodeModel::flat_params() const {
  Vector v(num_parameters());
  v << encoder.params(), dynamics.params(), decoder.params();
  return v;
}

void AqnodeModel::set_flat_params(const Vector& flat) {
  if (flat.size() != num_parameters())
    throw std::invalid_argument("AqnodeModel::set_flat_params: length mismatch");
  encoder.set_params(flat.head(encoder.size()));
  dynamics.set_params(flat.segment(encoder.size(), dynamics.size()));
  decoder.set_params(flat.tail(decoder.size()));
}

void AqnodeModel::validate() const {
  if (latent_dim <= 0) throw std::invalid_argument("AqnodeModel: latent_dim must be positive");
  if (prefix_len < 0) throw std::invalid_argument("AqnodeModel: prefix_len must be >= 0");
  if (encoder.input_dim() != 5 + prefix_len)
    throw std::invalid_argument("AqnodeModel: encoder input must be 5 + prefix_len");
  if (encoder.output_dim() != latent_dim || decoder.input_dim() != latent_dim ||
      dynamics.output_dim() != latent_dim)
    throw std::invalid_argument("AqnodeModel: latent sizes disagree");
  if (dynamics.input_dim() != latent_dim + signals.width())
    throw std::invalid_argument("AqnodeModel: dynamics input must be latent + signal width");
  if (decoder.output_dim() != 5)
    throw std::invalid_argument("AqnodeModel: decoder must emit 5 outputs");
}

AqnodeModel make_model(std::vector<int> encoder_dims, std::vector<int> dynamics_dims,
                       std::vector<int> decoder_dims, int prefix_len, SignalSpec signals,
                       std::uint64_t seed) {
  AqnodeModel m;
  m.encoder = mlp_init(encoder_dims, seed);
  m.dynamics = mlp_init(dynamics_dims, seed + 1);
  m.decoder = mlp_init(decoder_dims, seed + 2);
  m.latent_dim = encoder_dims.back();
  m.prefix_len = prefix_len;
  m.signals = signals;
  m.validate();
  return m;
}

AqnodeModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  const int d = cfg.latent_dim;
  return make_model({5 + cfg.prefix_len, cfg.hidden, d},
                    {d + cfg.signals.width(), cfg.hidden, d}, {d, cfg.hidden, 5},
                    cfg.prefix_len, cfg.signals, seed);
}

namespace {

/// Evaluates dh/dt = MLP([h, t, signals]) with the signal block held for a step.
class LatentField {
 public:
  explicit LatentField(const AqnodeModel& m) : m_(m), input_(m.latent_dim + m.signals.width()) {}

  void hold(double ux, double uy, double dy) {
    const SignalSpec& spec = m_.signals;
    const int d = m_.latent_dim;
    if (spec.mode == SignalMode::kFiltering) {
      input_(d + 1) = spec.dy_scale * dy;
    } else {
      input_(d + 1) = spec.u_scale * ux;
      input_(d + 2) = spec.u_scale * uy;
      input_(d + 3) = spec.dy_scale * dy;
    }
  }

  void hold(const SignalTrack& s, int i) { hold(s.ux[i], s.uy[i], s.dy[i]); }

  const Vector& eval(double t, const Vector& h, MlpParams::Tape& tape) {
    input_.head(m_.latent_dim) = h;
    input_(m_.latent_dim) = m_.signals.time_scale * t;
    return m_.dynamics.forward(input_, tape);
  }

  Vector step(const Vector& h, double t, double dt, long index) {
    auto f = [&](double tau, const Vector& y) { return Vector(eval(tau, y, tape_)); };
    return rk4_step(f, h, t, dt, index);
  }

 private:
  const AqnodeModel& m_;
  Vector input_;
  MlpParams::Tape tape_;
};

void check_latent(const Vector& h, const char* where, long step) {
  if (!h.allFinite()) {
    std::ostringstream os;
    os << where << ": non-finite latent at step " << step;
    throw IntegrationError(os.str(), 0.0, step);
  }
}

}  // namespace

Vector encode(const AqnodeModel& m, const AugmentedState& y0, std::span<const double> dy_prefix) {
  if (static_cast<int>(dy_prefix.size()) != m.prefix_len)
    throw std::invalid_argument("encode: measurement prefix has " +
                                std::to_string(dy_prefix.size()) + " samples, expected " +
                                std::to_string(m.prefix_len));
  Vector in(5 + m.prefix_len);
  in.head<5>() = y0.vector();
  for (int k = 0; k < m.prefix_len; ++k) in(5 + k) = m.signals.dy_scale * dy_prefix[k];
  return m.encoder.forward(in);
}

std::vector<Vector> rollout(const AqnodeModel& m, const Vector& h0, const TimeGrid& grid,
                            const SignalTrack& signals) {
  signals.validate();
  if (signals.grid.n_steps != grid.n_steps)
    throw std::invalid_argument("rollout: signals do not cover the grid");
  if (h0.size() != m.latent_dim) throw std::invalid_argument("rollout: latent size mismatch");
  check_latent(h0, "rollout", 0);
  LatentField field(m);
  std::vector<Vector> out;
  out.reserve(grid.size());
  out.push_back(h0);
  const double dt = grid.dt();
  for (int i = 0; i < grid.n_steps; ++i) {
    field.hold(signals, i);
    out.push_back(field.step(out.back(), grid.time(i), dt, i));
  }
  return out;
}

Vector latent_step(const AqnodeModel& m, const Vector& h, double t, double dt, double ux,
                   double uy, double dy, long step) {
  if (h.size() != m.latent_dim) throw std::invalid_argument("latent_step: latent size mismatch");
  LatentField field(m);
  field.hold(ux, uy, dy);
  return field.step(h, t, dt, step);
}

std::vector<AugmentedState> decode_trajectory(const AqnodeModel& m,
                                              const std::vector<Vector>& latents) {
  std::vector<AugmentedState> out;
  out.reserve(latents.size());
  MlpParams::Tape tape;
  for (const Vector& h : latents) {
    if (h.size() != m.latent_dim)
      throw std::invalid_argument("decode_trajectory: latent size mismatch");
    const Vector& y = m.decoder.forward(h, tape);
    out.push_back(AugmentedState::from_vector(y.head<5>()));
  }
  return out;
}

std::vector<AugmentedState> predict(const AqnodeModel& m, const AugmentedState& y0,
                                    const SignalTrack& signals) {
  if (static_cast<int>(signals.dy.size()) < m.prefix_len)
    throw std::invalid_argument("predict: trace shorter than the encoder prefix");
  const Vector h0 = encode(m, y0, std::span(signals.dy.data(), m.prefix_len));
  return decode_trajectory(m, rollout(m, h0, signals.grid, signals));
}

LossParts loss(const std::vector<AugmentedState>& pred, const std::vector<AugmentedState>& truth,
               const LossWeights& w) {
  if (pred.empty() || pred.size() != truth.size())
    throw std::invalid_argument("loss: prediction and truth lengths differ or are empty");
  w.validate();
  LossParts parts;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const Eigen::Matrix<double, 5, 1> d = pred[k].vector() - truth[k].vector();
    parts.state += d.head<3>().squaredNorm();
    parts.param += d.tail<2>().squaredNorm();
  }
  const double n = static_cast<double>(pred.size());
  parts.state /= n;
  parts.param /= n;
  parts.total = w.kappa * parts.state + w.beta * parts.param;
  return parts;
}

namespace {

using Mat = MlpParams::Mat;

/// Column-per-sample counterpart of LatentField.
class BatchField {
 public:
  BatchField(const AqnodeModel& m, int cols)
      : m_(m), input_(m.latent_dim + m.signals.width(), cols) {}

  void hold(std::span<const GradCase* const> cases, int i) {
    const SignalSpec& spec = m_.signals;
    const int d = m_.latent_dim;
    for (int c = 0; c < static_cast<int>(cases.size()); ++c) {
      const SignalTrack& s = cases[c]->signals;
      if (spec.mode == SignalMode::kFiltering) {
        input_(d + 1, c) = spec.dy_scale * s.dy[i];
      } else {
        input_(d + 1, c) = spec.u_scale * s.ux[i];
        input_(d + 2, c) = spec.u_scale * s.uy[i];
        input_(d + 3, c) = spec.dy_scale * s.dy[i];
      }
    }
  }

  template <typename Derived>
  const Mat& eval(double t, const Eigen::MatrixBase<Derived>& h, MlpParams::BatchTape& tape) {
    input_.topRows(m_.latent_dim) = h;
    input_.row(m_.latent_dim).setConstant(m_.signals.time_scale * t);
    return m_.dynamics.forward_batch(input_, tape);
  }

 private:
  const AqnodeModel& m_;
  Mat input_;
};

}  // namespace

GradientResult batch_gradients(const AqnodeModel& m, std::span<const GradCase* const> cases) {
  if (cases.empty()) throw std::invalid_argument("batch_gradients: empty batch");
  const TimeGrid& grid = cases.front()->signals.grid;
  for (const GradCase* c : cases) {
    c->signals.validate();
    c->weights.validate();
    if (c->signals.grid.n_steps != grid.n_steps || c->signals.grid.t0 != grid.t0 ||
        c->signals.grid.t1 != grid.t1)
      throw std::invalid_argument("batch_gradients: all cases must share one grid");
    if (static_cast<int>(c->truth.size()) != grid.size())
      throw std::invalid_argument("batch_gradients: truth not aligned to grid");
    if (static_cast<int>(c->signals.dy.size()) < m.prefix_len)
      throw std::invalid_argument("batch_gradients: trace shorter than encoder prefix");
  }
  const int nb = static_cast<int>(cases.size());
  const int n = grid.n_steps;
  const int d = m.latent_dim;
  const long n_enc = m.encoder.size();
  const long n_dyn = m.dynamics.size();
  GradientResult res;
  res.grad = Vector::Zero(m.num_parameters());
  res.time_adjoint = 0.0;
  auto g_enc = res.grad.segment(0, n_enc);
  auto g_dyn = res.grad.segment(n_enc, n_dyn);
  auto g_dec = res.grad.segment(n_enc + n_dyn, m.decoder.size());

  // Forward pass with every grid state cached.
  Mat enc_in(5 + m.prefix_len, nb);
  for (int c = 0; c < nb; ++c) {
    enc_in.col(c).head<5>() = cases[c]->y0.vector();
    for (int k = 0; k < m.prefix_len; ++k)
      enc_in(5 + k, c) = m.signals.dy_scale * cases[c]->signals.dy[k];
  }
  MlpParams::BatchTape enc_tape;
  std::vector<Mat> hs;
  hs.reserve(grid.size());
  hs.push_back(m.encoder.forward_batch(enc_in, enc_tape));
  if (!hs.front().allFinite()) throw IntegrationError("batch_gradients: non-finite latent at step 0", grid.t0, 0);

  BatchField field(m, nb);
  std::array<MlpParams::BatchTape, 4> tapes;
  const double dt = grid.dt();
  const double half = 0.5 * dt;
  Mat k1, k2, k3, z;
  for (int i = 0; i < n; ++i) {
    const double t = grid.time(i);
    const Mat& h = hs.back();
    field.hold(cases, i);
    k1 = field.eval(t, h, tapes[0]);
    k2 = field.eval(t + half, h + half * k1, tapes[1]);
    k3 = field.eval(t + half, h + half * k2, tapes[2]);
    const Mat& k4 = field.eval(t + dt, h + dt * k3, tapes[3]);
    z = h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!z.allFinite()) {
      std::ostringstream os;
      os << "batch_gradients: non-finite latent at step " << i;
      throw IntegrationError(os.str(), t, i);
    }
    hs.push_back(std::move(z));
  }

  // Decoder losses and their cotangent jumps on the latent state.
  const double inv_n = 1.0 / static_cast<double>(grid.size());
  const double inv_b = 1.0 / static_cast<double>(nb);
  std::vector<Mat> jumps(grid.size());
  std::vector<LossParts> parts(nb);
  MlpParams::BatchTape dec_tape;
  Mat cot(5, nb);
  for (int k = 0; k <= n; ++k) {
    const Mat& y = m.decoder.forward_batch(hs[k], dec_tape);
    for (int c = 0; c < nb; ++c) {
      const Eigen::Matrix<double, 5, 1> diff = y.col(c).head<5>() - cases[c]->truth[k].vector();
      parts[c].state += diff.head<3>().squaredNorm();
      parts[c].param += diff.tail<2>().squaredNorm();
      const LossWeights& w = cases[c]->weights;
      cot.col(c).head<3>() = (2.0 * w.kappa * inv_n * inv_b) * diff.head<3>();
      cot.col(c).tail<2>() = (2.0 * w.beta * inv_n * inv_b) * diff.tail<2>();
    }
    m.decoder.vjp_batch(dec_tape, cot, g_dec, jumps[k]);
  }
  for (int c = 0; c < nb; ++c) {
    const LossWeights& w = cases[c]->weights;
    const double st = parts[c].state * inv_n;
    const double pa = parts[c].param * inv_n;
    res.loss.state += st * inv_b;
    res.loss.param += pa * inv_b;
    res.loss.total += (w.kappa * st + w.beta * pa) * inv_b;
  }

  // Backward sweep: a(t_N) = dL/dh(t_N), then one reverse RK4 step per
  // interval (stages recomputed from the cached grid state) followed by the
  // jump from the loss term at that grid point.
  Mat a = std::move(jumps[n]);
  Mat gin, hb, kb1, kb2, kb3, kb4;
  const double ts = m.signals.time_scale;
  for (int i = n - 1; i >= 0; --i) {
    const double t = grid.time(i);
    const Mat& h = hs[i];
    field.hold(cases, i);
    k1 = field.eval(t, h, tapes[0]);
    k2 = field.eval(t + half, h + half * k1, tapes[1]);
    k3 = field.eval(t + half, h + half * k2, tapes[2]);
    field.eval(t + dt, h + dt * k3, tapes[3]);

    kb4 = (dt / 6.0) * a;
    kb3 = (dt / 3.0) * a;
    kb2 = kb3;
    kb1 = kb4;
    hb = a;

    m.dynamics.vjp_batch(tapes[3], kb4, g_dyn, gin);
    hb += gin.topRows(d);
    kb3 += dt * gin.topRows(d);
    res.time_adjoint += ts * gin.row(d).sum();

    m.dynamics.vjp_batch(tapes[2], kb3, g_dyn, gin);
    hb += gin.topRows(d);
    kb2 += half * gin.topRows(d);
    res.time_adjoint += ts * gin.row(d).sum();

    m.dynamics.vjp_batch(tapes[1], kb2, g_dyn, gin);
    hb += gin.topRows(d);
    kb1 += half * gin.topRows(d);
    res.time_adjoint += ts * gin.row(d).sum();

    m.dynamics.vjp_batch(tapes[0], kb1, g_dyn, gin);
    hb += gin.topRows(d);
    res.time_adjoint += ts * gin.row(d).sum();

    a = hb + jumps[i];
    if (!a.allFinite()) {
      std::ostringstream os;
      os << "adjoint_gradients: non-finite adjoint at step " << i;
      throw IntegrationError(os.str(), t, i);
    }
  }

  Mat enc_gin;
  m.encoder.vjp_batch(enc_tape, a, g_enc, enc_gin);
  return res;
}

GradientResult adjoint_gradients(const AqnodeModel& m, const AugmentedState& y0,
                                 const SignalTrack& signals,
                                 const std::vector<AugmentedState>& truth, const LossWeights& w) {
  const GradCase c{y0, signals, truth, w};
  const GradCase* one[] = {&c};
  return batch_gradients(m, one);
}

double case_loss(const AqnodeModel& m, const GradCase& c) {
  return loss(predict(m, c.y0, c.signals), c.truth, c.weights).total;
}

double grad_check(const AqnodeModel& m, const GradCase& c, double fd_step, double abs_floor) {
  const Vector g = adjoint_gradients(m, c.y0, c.signals, c.truth, c.weights).grad;
  AqnodeModel probe = m;
  Vector theta = m.flat_params();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double saved = theta(i);
    theta(i) = saved + fd_step;
    probe.set_flat_params(theta);
    const double up = case_loss(probe, c);
    theta(i) = saved - fd_step;
    probe.set_flat_params(theta);
    const double down = case_loss(probe, c);
    theta(i) = saved;
    const double fd = (up - down) / (2.0 * fd_step);
    if (std::abs(fd) < abs_floor && std::abs(g(i)) < abs_floor) continue;
    worst = std::max(worst, std::abs(fd - g(i)) / std::max(std::abs(fd), std::abs(g(i))));
  }
  return worst;
}

}  // namespace aqnode
