// Small dense multilayer perceptron with reverse-mode products and Adam.
//
// All parameters live in one contiguous vector; per-layer weights are
// row-major views into it, followed by the layer bias. Hidden layers use
// tanh, the output layer is affine.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace aqnode {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Vector = VectorX<double>;

namespace detail {

// tanh through a single exp so that the double path vectorizes.
template <typename Derived>
void tanh_inplace(Eigen::DenseBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if constexpr (std::is_same_v<Scalar, double>) {
    auto&& a = x.derived().array();
    const auto e = (Scalar(-2) * a.abs()).exp().eval();
    a = ((Scalar(1) - e) / (Scalar(1) + e)) * a.sign();
  } else {
    x.derived().array() = x.derived().array().tanh();
  }
}

}  // namespace detail

template <typename Scalar>
class Mlp {
 public:
  using Vec = VectorX<Scalar>;
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMatMap = Eigen::Map<const RowMat>;
  using MatMap = Eigen::Map<RowMat>;
  using ConstVecMap = Eigen::Map<const Vec>;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  /// Per-call activation storage; act[0] is the input, act.back() the output.
  struct Tape {
    std::vector<Vec> act;
  };

  /// Same as Tape with one column per sample.
  struct BatchTape {
    std::vector<Mat> act;
  };

  Mlp() = default;

  explicit Mlp(std::vector<int> layer_dims) : dims_(std::move(layer_dims)) {
    if (dims_.size() < 2) throw std::invalid_argument("Mlp: need at least two layer dims");
    for (int d : dims_)
      if (d <= 0) throw std::invalid_argument("Mlp: layer dims must be positive");
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l)
      offsets_.push_back(offsets_.back() + (dims_[l] + 1) * dims_[l + 1]);
    params_ = Vec::Zero(offsets_.back());
  }

  static long count_parameters(const std::vector<int>& dims) {
    long n = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l)
      n += static_cast<long>(dims[l] + 1) * dims[l + 1];
    return n;
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  int num_layers() const { return static_cast<int>(dims_.size()) - 1; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  long size() const { return params_.size(); }

  const Vec& params() const { return params_; }
  Vec& params() { return params_; }

  /// Replaces the parameter vector; the length must conform to the dims.
  void set_params(const Vec& flat) {
    if (flat.size() != params_.size())
      throw std::invalid_argument("Mlp::set_params: expected " +
                                  std::to_string(params_.size()) + " values, got " +
                                  std::to_string(flat.size()));
    params_ = flat;
  }

  ConstMatMap weight(int l) const {
    return ConstMatMap(params_.data() + offsets_[l], dims_[l + 1], dims_[l]);
  }
  MatMap weight(int l) { return MatMap(params_.data() + offsets_[l], dims_[l + 1], dims_[l]); }
  ConstVecMap bias(int l) const {
    return ConstVecMap(params_.data() + offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]);
  }
  Eigen::Map<Vec> bias(int l) {
    return Eigen::Map<Vec>(params_.data() + offsets_[l] + dims_[l] * dims_[l + 1],
                           dims_[l + 1]);
  }
  long weight_offset(int l) const { return offsets_[l]; }

  template <typename Derived>
  const Vec& forward(const Eigen::MatrixBase<Derived>& x, Tape& tape) const {
    check_input(x.size());
    tape.act.resize(dims_.size());
    tape.act[0] = x;
    for (int l = 0; l < num_layers(); ++l) {
      Vec& out = tape.act[l + 1];
      out.noalias() = weight(l) * tape.act[l];
      out += bias(l);
      if (l + 1 < num_layers()) detail::tanh_inplace(out);
    }
    return tape.act.back();
  }

  template <typename Derived>
  const Mat& forward_batch(const Eigen::MatrixBase<Derived>& x, BatchTape& tape) const {
    check_input(x.rows());
    tape.act.resize(dims_.size());
    tape.act[0] = x;
    for (int l = 0; l < num_layers(); ++l) {
      Mat& out = tape.act[l + 1];
      out.noalias() = weight(l) * tape.act[l];
      out.colwise() += bias(l);
      if (l + 1 < num_layers()) detail::tanh_inplace(out);
    }
    return tape.act.back();
  }

  template <typename Derived>
  Vec forward(const Eigen::MatrixBase<Derived>& x) const {
    Tape tape;
    return forward(x, tape);
  }

  /// Reverse-mode product for the call recorded in `tape`: adds
  /// (d out / d params)^T cot into `grad_params` and writes
  /// (d out / d x)^T cot into `grad_input`.
  template <typename GradDerived>
  void vjp(const Tape& tape, const Vec& cot, Eigen::MatrixBase<GradDerived>& grad_params,
           Vec& grad_input) const {
    if (cot.size() != output_dim())
      throw std::invalid_argument("Mlp::vjp: cotangent has wrong length");
    if (grad_params.size() != size())
      throw std::invalid_argument("Mlp::vjp: gradient buffer has wrong length");
    Vec delta = cot;
    Vec upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
      const Vec& in = tape.act[l];
      MatMap gw(grad_params.derived().data() + offsets_[l], dims_[l + 1], dims_[l]);
      gw.noalias() += delta * in.transpose();
      grad_params.segment(offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]) += delta;
      upstream.noalias() = weight(l).transpose() * delta;
      if (l > 0)
        delta = upstream.array() * (Scalar(1) - in.array().square());
    }
    grad_input = std::move(upstream);
  }

  /// Batched vjp; parameter gradients are summed over the columns.
  template <typename GradDerived>
  void vjp_batch(const BatchTape& tape, const Mat& cot, Eigen::MatrixBase<GradDerived>& grad_params,
                 Mat& grad_input) const {
    if (cot.rows() != output_dim() || cot.cols() != tape.act[0].cols())
      throw std::invalid_argument("Mlp::vjp_batch: cotangent has wrong shape");
    if (grad_params.size() != size())
      throw std::invalid_argument("Mlp::vjp_batch: gradient buffer has wrong length");
    Mat delta = cot;
    Mat upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
      const Mat& in = tape.act[l];
      MatMap gw(grad_params.derived().data() + offsets_[l], dims_[l + 1], dims_[l]);
      gw.noalias() += delta * in.transpose();
      grad_params.segment(offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]) +=
          delta.rowwise().sum();
      upstream.noalias() = weight(l).transpose() * delta;
      if (l > 0) delta = upstream.array() * (Scalar(1) - in.array().square());
    }
    grad_input = std::move(upstream);
  }

  /// Input-only reverse product (no parameter gradient).
  Vec vjp_input(const Tape& tape, const Vec& cot) const {
    Vec delta = cot;
    Vec upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
      upstream.noalias() = weight(l).transpose() * delta;
      if (l > 0) delta = upstream.array() * (Scalar(1) - tape.act[l].array().square());
    }
    return upstream;
  }

 private:
  void check_input(Eigen::Index n) const {
    if (n != input_dim())
      throw std::invalid_argument("Mlp: input has " + std::to_string(n) +
                                  " entries, expected " + std::to_string(input_dim()));
  }

  std::vector<int> dims_;
  std::vector<long> offsets_;
  Vec params_;
};

using MlpParams = Mlp<double>;

/// Zero-mean Gaussian weights scaled by 1/sqrt(fan_in), zero biases.
template <typename Scalar = double>
Mlp<Scalar> mlp_init(const std::vector<int>& layer_dims, std::uint64_t seed) {
  Mlp<Scalar> net(layer_dims);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int l = 0; l < net.num_layers(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer_dims[l]));
    auto w = net.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = Scalar(scale * normal(rng));
  }
  return net;
}

/// (grad wrt parameters, grad wrt input) for a single evaluation.
template <typename Scalar>
std::pair<VectorX<Scalar>, VectorX<Scalar>> mlp_vjp(const Mlp<Scalar>& net,
                                                    const VectorX<Scalar>& x,
                                                    const VectorX<Scalar>& cot) {
  typename Mlp<Scalar>::Tape tape;
  net.forward(x, tape);
  VectorX<Scalar> gp = VectorX<Scalar>::Zero(net.size());
  VectorX<Scalar> gx;
  net.vjp(tape, cot, gp, gx);
  return {std::move(gp), std::move(gx)};
}

struct AdamState {
  long step{0};
  Vector m;
  Vector v;
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};

  AdamState() = default;
  explicit AdamState(long n, double learning_rate = 1e-3)
      : m(Vector::Zero(n)), v(Vector::Zero(n)), lr(learning_rate) {}
};

/// Bias-corrected Adam update applied in place.
inline void adam_step(AdamState& st, Vector& params, const Vector& grads) {
  if (params.size() != grads.size() || st.m.size() != params.size() ||
      st.v.size() != params.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  if (!grads.allFinite()) throw std::runtime_error("adam_step: non-finite gradient");
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  params.array() -= st.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

}  // namespace aqnode
