// Copyright 2026 The MPVIC Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Probabilistic ensemble of Gaussian MLPs for the learned impedance model.
//
// Each member maps a normalized 15-dim input [s, K, f_ext, s_r] to a diagonal
// Gaussian over the normalized state delta s' - s. Members are trained on
// bootstrap resamples with the Gaussian negative log-likelihood; spread of the
// member means is the epistemic uncertainty used for exploration.

#ifndef MPVIC_PENN_HPP_
#define MPVIC_PENN_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpvic/common.hpp"

namespace mpvic {

using InputBatch = Eigen::Matrix<double, kInputDim, Eigen::Dynamic>;
using StateBatch = Eigen::Matrix<double, kStateDim, Eigen::Dynamic>;

/// Diagonal Gaussian over the state delta, one column per query.
struct GaussianBatch {
  StateBatch mean;
  StateBatch logvar;
};

struct GaussianPrediction {
  Vec6 mean = Vec6::Zero();
  Vec6 logvar = Vec6::Zero();
};

/// Anything that can be rolled out with trajectory sampling: `size()` members,
/// each predicting a Gaussian state delta for a batch of inputs.
template <class M>
concept ProbabilisticDynamics = requires(const M& m, std::size_t member, const InputBatch& in) {
  { m.size() } -> std::convertible_to<std::size_t>;
  { m.predict(member, in) } -> std::same_as<GaussianBatch>;
};

// ---------------------------------------------------------------------------
// Normalization

class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(Eigen::VectorXd mean, Eigen::VectorXd stddev) : mean_(std::move(mean)), std_(std::move(stddev)) {}

  /// Per-row statistics over the columns of `data`; constant rows get unit scale.
  static Normalizer fit(const Eigen::MatrixXd& data) {
    if (data.cols() == 0) throw Error("Normalizer::fit: no samples");
    Eigen::VectorXd mean = data.rowwise().mean();
    Eigen::VectorXd var = (data.colwise() - mean).array().square().rowwise().mean();
    Eigen::VectorXd sd = var.array().sqrt();
    for (Eigen::Index i = 0; i < sd.size(); ++i) {
      if (!(sd[i] > 1e-12)) sd[i] = 1.0;
    }
    return Normalizer(std::move(mean), std::move(sd));
  }

  bool initialized() const { return mean_.size() > 0; }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& stddev() const { return std_; }

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const {
    require(x.rows());
    return (x.colwise() - mean_).array().colwise() / std_.array();
  }

  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& z) const {
    require(z.rows());
    return (z.array().colwise() * std_.array()).matrix().colwise() + mean_;
  }

 private:
  void require(Eigen::Index rows) const {
    if (!initialized()) throw Error("normalizer used before initialization");
    if (rows != mean_.size()) throw Error("normalizer dimension mismatch");
  }

  Eigen::VectorXd mean_;
  Eigen::VectorXd std_;
};

// ---------------------------------------------------------------------------
// Single probabilistic member

namespace detail {

template <class A>
auto sigmoid_array(const A& x) {
  return (1 + (-x).exp()).inverse();
}

template <class Scalar>
Scalar softplus(Scalar x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, Scalar(0));
}

template <class Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace detail

inline constexpr double kLogvarBoundPenalty = 0.01;

template <class Scalar>
class GaussianMlp {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Layer {
    Matrix weight;  // out x in
    Vector bias;
  };

  struct Output {
    Matrix mean;    // out_dim x n, normalized units
    Matrix logvar;
  };

  GaussianMlp() = default;

  /// Zero-initialized network with the given shape.
  GaussianMlp(int input_dim, int output_dim, const std::vector<int>& hidden, double logvar_min, double logvar_max)
      : output_dim_(output_dim) {
    int fan_in = input_dim;
    for (int h : hidden) {
      layers_.push_back({Matrix::Zero(h, fan_in), Vector::Zero(h)});
      fan_in = h;
    }
    layers_.push_back({Matrix::Zero(2 * output_dim, fan_in), Vector::Zero(2 * output_dim)});
    max_logvar_ = Vector::Constant(output_dim, static_cast<Scalar>(logvar_max));
    min_logvar_ = Vector::Constant(output_dim, static_cast<Scalar>(logvar_min));
  }

  /// Truncated-normal weights with std 1/(2 sqrt(fan_in)), zero biases.
  static GaussianMlp random(int input_dim, int output_dim, const std::vector<int>& hidden, double logvar_min,
                            double logvar_max, Rng& rng) {
    GaussianMlp net(input_dim, output_dim, hidden, logvar_min, logvar_max);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& layer : net.layers_) {
      const double sd = 1.0 / (2.0 * std::sqrt(static_cast<double>(layer.weight.cols())));
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
          double z = normal(rng);
          while (std::abs(z) > 2.0) z = normal(rng);
          layer.weight(i, j) = static_cast<Scalar>(sd * z);
        }
      }
    }
    return net;
  }

  int input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
  int output_dim() const { return output_dim_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Vector& max_logvar() { return max_logvar_; }
  const Vector& max_logvar() const { return max_logvar_; }
  Vector& min_logvar() { return min_logvar_; }
  const Vector& min_logvar() const { return min_logvar_; }

  std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(max_logvar_.size() + min_logvar_.size());
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  /// Same shape, all parameters zero (used as a gradient accumulator).
  GaussianMlp zeros_like() const {
    GaussianMlp g = *this;
    for (auto& l : g.layers_) {
      l.weight.setZero();
      l.bias.setZero();
    }
    g.max_logvar_.setZero();
    g.min_logvar_.setZero();
    return g;
  }

  /// Flat view helpers for finite-difference tests and the optimizer.
  template <class F>
  void for_each_parameter(F&& f) {
    for (auto& l : layers_) {
      f(l.weight);
      f(l.bias);
    }
    f(max_logvar_);
    f(min_logvar_);
  }

  double bound_regularization() const {
    return kLogvarBoundPenalty * static_cast<double>(max_logvar_.sum() - min_logvar_.sum());
  }

  Output forward(const Matrix& x) const {
    Matrix a = x;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
      Matrix z = layers_[i].weight * a;
      z.colwise() += layers_[i].bias;
      a = (z.array() * detail::sigmoid_array(z.array())).matrix();
    }
    Matrix out = layers_.back().weight * a;
    out.colwise() += layers_.back().bias;
    Output o;
    o.mean = out.topRows(output_dim_);
    o.logvar = out.bottomRows(output_dim_);
    for (Eigen::Index j = 0; j < o.logvar.cols(); ++j) {
      for (Eigen::Index i = 0; i < output_dim_; ++i) o.logvar(i, j) = clamp_logvar(o.logvar(i, j), i);
    }
    return o;
  }

  /// Mean over the batch of the per-sample NLL, plus the log-variance bound
  /// penalty. Accumulates d(loss)/d(params) into `grad` when given.
  double loss_and_gradient(const Matrix& x, const Matrix& target, GaussianMlp* grad) const {
    const Eigen::Index n = x.cols();
    std::vector<Matrix> pre;   // pre-activations of hidden layers
    std::vector<Matrix> act;   // inputs to each layer
    act.reserve(layers_.size());
    act.push_back(x);
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
      Matrix z = layers_[i].weight * act.back();
      z.colwise() += layers_[i].bias;
      act.push_back((z.array() * detail::sigmoid_array(z.array())).matrix());
      pre.push_back(std::move(z));
    }
    Matrix out = layers_.back().weight * act.back();
    out.colwise() += layers_.back().bias;

    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
    Matrix d_out(out.rows(), n);
    double total = 0.0;
    Vector d_max = Vector::Zero(output_dim_);
    Vector d_min = Vector::Zero(output_dim_);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < output_dim_; ++i) {
        const Scalar raw = out(output_dim_ + i, j);
        const Scalar a = max_logvar_[i] - raw;
        const Scalar h = max_logvar_[i] - detail::softplus(a);
        const Scalar lv = min_logvar_[i] + detail::softplus(h - min_logvar_[i]);
        const Scalar err = target(i, j) - out(i, j);
        const Scalar inv_var = std::exp(-lv);
        total += 0.5 * (static_cast<double>(err) * err * inv_var + lv);

        const Scalar d_lv = Scalar(0.5) * (Scalar(1) - err * err * inv_var) * inv_n;
        const Scalar s_min = detail::sigmoid(h - min_logvar_[i]);
        const Scalar s_max = detail::sigmoid(a);
        d_out(i, j) = -err * inv_var * inv_n;
        d_out(output_dim_ + i, j) = d_lv * s_min * s_max;
        d_max[i] += d_lv * s_min * (Scalar(1) - s_max);
        d_min[i] += d_lv * (Scalar(1) - s_min);
      }
    }
    const double loss = total / static_cast<double>(n) + bound_regularization();
    if (grad == nullptr) return loss;

    grad->max_logvar_ += d_max + Vector::Constant(output_dim_, static_cast<Scalar>(kLogvarBoundPenalty));
    grad->min_logvar_ += d_min - Vector::Constant(output_dim_, static_cast<Scalar>(kLogvarBoundPenalty));

    Matrix delta = std::move(d_out);
    for (std::size_t k = layers_.size(); k-- > 0;) {
      grad->layers_[k].weight.noalias() += delta * act[k].transpose();
      grad->layers_[k].bias += delta.rowwise().sum();
      if (k == 0) break;
      Matrix d_act = layers_[k].weight.transpose() * delta;
      const auto& z = pre[k - 1].array();
      const auto s = detail::sigmoid_array(z).eval();
      delta = (d_act.array() * (s * (1 + z * (1 - s)))).matrix();
    }
    return loss;
  }

 private:
  // Smooth saturation into [min_logvar, max_logvar].
  Scalar clamp_logvar(Scalar raw, Eigen::Index i) const {
    const Scalar h = max_logvar_[i] - detail::softplus(max_logvar_[i] - raw);
    return min_logvar_[i] + detail::softplus(h - min_logvar_[i]);
  }

  int output_dim_ = kStateDim;
  std::vector<Layer> layers_;
  Vector max_logvar_;
  Vector min_logvar_;
};

/// Gaussian NLL core: sum_i [(target - mean)^2 exp(-logvar) + logvar] / 2,
/// plus an optional bound-regularization term.
inline double nll_loss(const GaussianPrediction& pred, const Vec6& target, double bound_regularization = 0.0) {
  const Vec6 err = target - pred.mean;
  return 0.5 * (err.array().square() * (-pred.logvar.array()).exp() + pred.logvar.array()).sum() +
         bound_regularization;
}

// ---------------------------------------------------------------------------
// Adam

template <class Scalar>
class Adam {
 public:
  Adam(const GaussianMlp<Scalar>& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(GaussianMlp<Scalar>& net, GaussianMlp<Scalar>& grad) {
    ++t_;
    const Scalar b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(beta1_, t_));
    const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(beta2_, t_));
    const Scalar lr = static_cast<Scalar>(lr_), eps = static_cast<Scalar>(eps_);
    auto update = [&](auto& p, auto& g, auto& m, auto& v) {
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.cwiseAbs2();
      p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    auto& pl = net.layers();
    auto& gl = grad.layers();
    auto& ml = m_.layers();
    auto& vl = v_.layers();
    for (std::size_t i = 0; i < pl.size(); ++i) {
      update(pl[i].weight, gl[i].weight, ml[i].weight, vl[i].weight);
      update(pl[i].bias, gl[i].bias, ml[i].bias, vl[i].bias);
    }
    update(net.max_logvar(), grad.max_logvar(), m_.max_logvar(), v_.max_logvar());
    update(net.min_logvar(), grad.min_logvar(), m_.min_logvar(), v_.min_logvar());
  }

 private:
  GaussianMlp<Scalar> m_;
  GaussianMlp<Scalar> v_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset

/// One experience tuple (s, [K, f_ext, s_r], s').
struct Transition {
  int trial = 0;
  CartesianState state;
  Vec3 stiffness = Vec3::Zero();
  Vec3 force = Vec3::Zero();
  Vec3 target = Vec3::Zero();
  CartesianState next;

  Eigen::Matrix<double, kInputDim, 1> input() const {
    Eigen::Matrix<double, kInputDim, 1> u;
    u << state.pos, state.vel, stiffness, force, target;
    return u;
  }
  Vec6 delta() const { return next.vector() - state.vector(); }
  bool operator==(const Transition&) const = default;
};

inline Eigen::Matrix<double, kInputDim, 1> model_input(const CartesianState& s, const Vec3& stiffness,
                                                       const Vec3& force, const Vec3& target) {
  Eigen::Matrix<double, kInputDim, 1> u;
  u << s.pos, s.vel, stiffness, force, target;
  return u;
}

/// Append-only transition store. Holdout membership depends only on the
/// index, so it never changes as the dataset grows.
class Dataset {
 public:
  explicit Dataset(double holdout_fraction = 0.1) : holdout_fraction_(holdout_fraction) {
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout fraction must lie in [0, 1)");
  }

  void append(const Transition& t) {
    if (!t.state.finite() || !t.next.finite() || !t.stiffness.allFinite() || !t.force.allFinite() ||
        !t.target.allFinite()) {
      throw NonFiniteError("Dataset::append: non-finite transition");
    }
    records_.push_back(t);
  }

  void append(std::span<const Transition> ts) {
    for (const auto& t : ts) append(t);
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const Transition& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<Transition>& records() const { return records_; }
  double holdout_fraction() const { return holdout_fraction_; }

  bool is_holdout(std::size_t i) const {
    const auto a = static_cast<long long>(std::floor(static_cast<double>(i + 1) * holdout_fraction_ + 1e-9));
    const auto b = static_cast<long long>(std::floor(static_cast<double>(i) * holdout_fraction_ + 1e-9));
    return a > b;
  }

  std::vector<std::size_t> train_indices() const { return split(false); }
  std::vector<std::size_t> holdout_indices() const { return split(true); }

  InputBatch inputs(std::span<const std::size_t> idx) const {
    InputBatch x(kInputDim, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) x.col(static_cast<Eigen::Index>(j)) = records_[idx[j]].input();
    return x;
  }

  StateBatch deltas(std::span<const std::size_t> idx) const {
    StateBatch y(kStateDim, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) y.col(static_cast<Eigen::Index>(j)) = records_[idx[j]].delta();
    return y;
  }

  static constexpr const char* kCsvHeader =
      "trial,x,y,z,vx,vy,vz,Kx,Ky,Kz,fx,fy,fz,rx,ry,rz,next_x,next_y,next_z,next_vx,next_vy,next_vz";

  void write_csv(std::ostream& os) const {
    os << kCsvHeader << '\n';
    for (const auto& t : records_) {
      os << t.trial;
      auto put = [&os](const Vec3& v) {
        for (int i = 0; i < 3; ++i) os << ',' << format_double(v[i]);
      };
      put(t.state.pos);
      put(t.state.vel);
      put(t.stiffness);
      put(t.force);
      put(t.target);
      put(t.next.pos);
      put(t.next.vel);
      os << '\n';
    }
  }

  void save_csv(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write dataset " + path.string());
    write_csv(os);
  }

  static Dataset read_csv(std::istream& is, double holdout_fraction = 0.1) {
    Dataset d(holdout_fraction);
    std::string line;
    if (!std::getline(is, line) || line != kCsvHeader) throw Error("dataset CSV: unexpected header");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 22) throw Error("dataset CSV: expected 22 fields");
      Transition t;
      t.trial = static_cast<int>(parse_double(f[0]));
      auto get = [&f](int at) { return Vec3(parse_double(f[at]), parse_double(f[at + 1]), parse_double(f[at + 2])); };
      t.state.pos = get(1);
      t.state.vel = get(4);
      t.stiffness = get(7);
      t.force = get(10);
      t.target = get(13);
      t.next.pos = get(16);
      t.next.vel = get(19);
      d.append(t);
    }
    return d;
  }

  static Dataset load_csv(const std::filesystem::path& path, double holdout_fraction = 0.1) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read dataset " + path.string());
    return read_csv(is, holdout_fraction);
  }

 private:
  std::vector<std::size_t> split(bool holdout) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (is_holdout(i) == holdout) out.push_back(i);
    }
    return out;
  }

  double holdout_fraction_;
  std::vector<Transition> records_;
};

// ---------------------------------------------------------------------------
// Ensemble

struct EnsembleConfig {
  int members = 5;
  std::vector<int> hidden = {256, 256, 256};
  double logvar_min = -10.0;
  double logvar_max = 0.5;

  void validate() const {
    if (members < 2) throw ConfigError("penn.ensemble_size must be at least 2");
    if (hidden.empty()) throw ConfigError("penn.hidden must list at least one layer");
    for (int h : hidden) {
      if (h < 1) throw ConfigError("penn.hidden sizes must be positive");
    }
    if (!(logvar_min < logvar_max)) throw ConfigError("penn.logvar_min must be below logvar_max");
  }
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;

  void validate() const {
    if (epochs < 0) throw ConfigError("penn.epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("penn.batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("penn.learning_rate must be positive");
  }
};

template <class Scalar>
class EnsembleT {
 public:
  using Member = GaussianMlp<Scalar>;
  using Matrix = typename Member::Matrix;

  EnsembleT() = default;

  EnsembleT(const EnsembleConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    for (int b = 0; b < config_.members; ++b) {
      members_.push_back(
          Member::random(kInputDim, kStateDim, config_.hidden, config_.logvar_min, config_.logvar_max, rng));
    }
  }

  /// Assembles an ensemble from existing members (checkpoint loading, tests).
  static EnsembleT from_parts(const EnsembleConfig& config, std::vector<Member> members) {
    if (members.empty()) throw Error("ensemble needs at least one member");
    EnsembleT e;
    e.config_ = config;
    e.config_.members = static_cast<int>(members.size());
    e.members_ = std::move(members);
    return e;
  }

  std::size_t size() const { return members_.size(); }
  const EnsembleConfig& config() const { return config_; }
  std::vector<Member>& members() { return members_; }
  const std::vector<Member>& members() const { return members_; }
  const Normalizer& input_normalizer() const { return input_norm_; }
  const Normalizer& output_normalizer() const { return output_norm_; }
  bool normalized() const { return input_norm_.initialized() && output_norm_.initialized(); }

  void set_normalizers(Normalizer in, Normalizer out) {
    if (in.mean().size() != kInputDim || out.mean().size() != kStateDim) throw Error("normalizer shape mismatch");
    input_norm_ = std::move(in);
    output_norm_ = std::move(out);
  }

  /// Fits both normalizers on the given transitions.
  void fit_normalizers(const Dataset& data, std::span<const std::size_t> idx) {
    set_normalizers(Normalizer::fit(data.inputs(idx)), Normalizer::fit(data.deltas(idx)));
  }

  Matrix normalize_inputs(const InputBatch& inputs) const {
    require_normalizers();
    if (!inputs.allFinite()) throw NonFiniteError("model input is not finite");
    return input_norm_.normalize(inputs).template cast<Scalar>();
  }

  /// Member output in normalized units.
  typename Member::Output forward_normalized(std::size_t member, const InputBatch& inputs) const {
    return members_.at(member).forward(normalize_inputs(inputs));
  }

  /// Member prediction of the state delta in physical units.
  GaussianBatch predict(std::size_t member, const InputBatch& inputs) const {
    auto out = forward_normalized(member, inputs);
    GaussianBatch g;
    g.mean = output_norm_.denormalize(out.mean.template cast<double>());
    g.logvar = out.logvar.template cast<double>();
    g.logvar.colwise() += (2.0 * output_norm_.stddev().array().log()).matrix();
    return g;
  }

  GaussianPrediction predict_one(std::size_t member, const CartesianState& s, const Vec3& stiffness,
                                 const Vec3& force, const Vec3& target) const {
    InputBatch in = model_input(s, stiffness, force, target);
    auto g = predict(member, in);
    return {g.mean.col(0), g.logvar.col(0)};
  }

 private:
  void require_normalizers() const {
    if (!normalized()) throw Error("ensemble normalizers are not initialized");
  }

  EnsembleConfig config_;
  std::vector<Member> members_;
  Normalizer input_norm_;
  Normalizer output_norm_;
};

using Ensemble = EnsembleT<float>;

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  int round = 0;
  int epoch = 0;
  double train_nll = 0.0;
  double holdout_nll = std::numeric_limits<double>::quiet_NaN();
  bool operator==(const EpochStats& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return round == o.round && epoch == o.epoch && same(train_nll, o.train_nll) && same(holdout_nll, o.holdout_nll);
  }
};

struct TrainingReport {
  std::vector<EpochStats> epochs;
  double initial_holdout_nll = std::numeric_limits<double>::quiet_NaN();
  bool operator==(const TrainingReport& o) const {
    return epochs == o.epochs &&
           (initial_holdout_nll == o.initial_holdout_nll ||
            (std::isnan(initial_holdout_nll) && std::isnan(o.initial_holdout_nll)));
  }
};

/// Bootstrap resample of `n` positions (sampling with replacement).
inline std::vector<std::size_t> bootstrap_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  if (n == 0) return idx;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

/// Mean core NLL of the ensemble members over the given transitions, in
/// normalized output units.
template <class Scalar>
double mean_nll(const EnsembleT<Scalar>& ensemble, const Dataset& data, std::span<const std::size_t> idx) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  using Matrix = typename EnsembleT<Scalar>::Matrix;
  const Matrix x = ensemble.normalize_inputs(data.inputs(idx));
  const Matrix y = ensemble.output_normalizer().normalize(data.deltas(idx)).template cast<Scalar>();
  double total = 0.0;
  for (const auto& m : ensemble.members()) total += m.loss_and_gradient(x, y, nullptr) - m.bound_regularization();
  return total / static_cast<double>(ensemble.size());
}

template <class Scalar>
TrainingReport train(EnsembleT<Scalar>& ensemble, const Dataset& data, const TrainConfig& config, Rng& rng,
                     int round = 0) {
  config.validate();
  if (data.empty()) throw TrainingError("train: empty dataset");
  const auto train_idx = data.train_indices();
  const auto holdout_idx = data.holdout_indices();
  if (train_idx.size() < static_cast<std::size_t>(config.batch_size)) {
    throw TrainingError("train: training split (" + std::to_string(train_idx.size()) + ") smaller than batch size");
  }
  ensemble.fit_normalizers(data, train_idx);

  using Matrix = typename EnsembleT<Scalar>::Matrix;
  const Matrix x_all = ensemble.normalize_inputs(data.inputs(train_idx));
  const Matrix y_all = ensemble.output_normalizer().normalize(data.deltas(train_idx)).template cast<Scalar>();

  const std::size_t n = train_idx.size();
  const std::size_t members = ensemble.size();
  std::vector<std::vector<std::size_t>> boot(members);
  for (auto& b : boot) b = bootstrap_indices(n, rng);
  std::vector<Adam<Scalar>> optimizers;
  for (const auto& m : ensemble.members()) optimizers.emplace_back(m, config.learning_rate);

  TrainingReport report;
  report.initial_holdout_nll = mean_nll(ensemble, data, holdout_idx);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  Matrix xb(kInputDim, config.batch_size), yb(kStateDim, config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < members; ++b) {
      auto& net = ensemble.members()[b];
      std::shuffle(boot[b].begin(), boot[b].end(), rng);
      double member_loss = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t len = std::min(batch, n - start);
        xb.resize(kInputDim, static_cast<Eigen::Index>(len));
        yb.resize(kStateDim, static_cast<Eigen::Index>(len));
        for (std::size_t j = 0; j < len; ++j) {
          xb.col(static_cast<Eigen::Index>(j)) = x_all.col(static_cast<Eigen::Index>(boot[b][start + j]));
          yb.col(static_cast<Eigen::Index>(j)) = y_all.col(static_cast<Eigen::Index>(boot[b][start + j]));
        }
        auto grad = net.zeros_like();
        const double loss = net.loss_and_gradient(xb, yb, &grad);
        if (!std::isfinite(loss)) {
          throw TrainingError("train: non-finite loss (member " + std::to_string(b) + ", epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batches) + ", round " +
                              std::to_string(round) + ")");
        }
        optimizers[b].step(net, grad);
        member_loss += loss - net.bound_regularization();
        ++batches;
      }
      epoch_loss += member_loss / static_cast<double>(batches);
    }
    EpochStats stats;
    stats.round = round;
    stats.epoch = epoch;
    stats.train_nll = epoch_loss / static_cast<double>(members);
    stats.holdout_nll = mean_nll(ensemble, data, holdout_idx);
    report.epochs.push_back(stats);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Epistemic uncertainty

/// Across-member unbiased variance of the predicted mean delta, summed over
/// output dimensions (physical units), one value per input column.
/// Unbiased across-member variance summed over rows, one value per column.
/// Computed on offsets from the first member so identical members give
/// exactly zero.
inline Eigen::VectorXd member_variance(std::span<const StateBatch> means) {
  const std::size_t members = means.size();
  if (members < 2) throw DomainError("predict_uncertainty: needs at least two ensemble members");
  const StateBatch& ref = means.front();
  StateBatch avg = StateBatch::Zero(kStateDim, ref.cols());
  for (const auto& m : means) avg += m - ref;
  avg /= static_cast<double>(members);
  Eigen::VectorXd rho = Eigen::VectorXd::Zero(ref.cols());
  for (const auto& m : means) rho += ((m - ref) - avg).colwise().squaredNorm().transpose();
  return rho / static_cast<double>(members - 1);
}

template <ProbabilisticDynamics Model>
Eigen::VectorXd predict_uncertainty_batch(const Model& model, const InputBatch& inputs) {
  const std::size_t members = model.size();
  if (members < 2) throw DomainError("predict_uncertainty: needs at least two ensemble members");
  std::vector<StateBatch> means;
  means.reserve(members);
  for (std::size_t b = 0; b < members; ++b) means.push_back(model.predict(b, inputs).mean);
  return member_variance(means);
}

template <ProbabilisticDynamics Model>
double predict_uncertainty(const Model& model, const CartesianState& s, const Vec3& stiffness, const Vec3& force,
                           const Vec3& target) {
  InputBatch in = model_input(s, stiffness, force, target);
  return predict_uncertainty_batch(model, in)[0];
}

// ---------------------------------------------------------------------------
// Trajectory sampling

/// Particle states over the horizon: states[t] is 6 x (P*N), column p*N + n
/// holds particle p of candidate sequence n.
struct ParticleRollout {
  std::vector<StateBatch> states;
  int particles = 0;
  int sequences = 0;
};

/// TS-infinity propagation: particle p stays bound to member p / (P/B) for the
/// whole horizon; each step adds a sample from that member's Gaussian.
/// `stiffness[n]` is a T x 3 sequence; force and target are held constant.
template <ProbabilisticDynamics Model>
ParticleRollout propagate_particles(const Model& model, const CartesianState& s0,
                                    std::span<const Eigen::MatrixXd> stiffness, const Vec3& force,
                                    const Vec3& target, int particles, Rng& rng) {
  const auto members = static_cast<int>(model.size());
  if (members < 1) throw Error("trajectory_sampling: empty model");
  if (particles < 1 || particles % members != 0) {
    throw DomainError("trajectory_sampling: particle count must be a positive multiple of the ensemble size");
  }
  const auto n_seq = static_cast<int>(stiffness.size());
  const int horizon = n_seq > 0 ? static_cast<int>(stiffness[0].rows()) : 0;
  const int cols = particles * n_seq;
  const int per_member = particles / members;

  ParticleRollout out;
  out.particles = particles;
  out.sequences = n_seq;
  StateBatch cur(kStateDim, cols);
  cur.colwise() = s0.vector();
  out.states.push_back(cur);

  std::normal_distribution<double> normal(0.0, 1.0);
  InputBatch in(kInputDim, cols);
  for (int t = 0; t < horizon; ++t) {
    for (int p = 0; p < particles; ++p) {
      for (int n = 0; n < n_seq; ++n) {
        const int c = p * n_seq + n;
        in.col(c).head<6>() = cur.col(c);
        in.col(c).segment<3>(6) = stiffness[static_cast<std::size_t>(n)].row(t).transpose();
        in.col(c).segment<3>(9) = force;
        in.col(c).segment<3>(12) = target;
      }
    }
    StateBatch next(kStateDim, cols);
    for (int b = 0; b < members; ++b) {
      const int first = b * per_member * n_seq;
      const int width = per_member * n_seq;
      const GaussianBatch g = model.predict(static_cast<std::size_t>(b), in.middleCols(first, width));
      next.middleCols(first, width) = cur.middleCols(first, width) + g.mean;
      for (int j = 0; j < width; ++j) {
        for (int i = 0; i < kStateDim; ++i) {
          const double sd = std::exp(0.5 * g.logvar(i, j));
          const double eps = normal(rng);
          if (sd > 0.0) next(i, first + j) += sd * eps;
        }
      }
    }
    cur = next;
    out.states.push_back(cur);
  }
  return out;
}

/// One control input of a rollout.
struct ActionStep {
  Vec3 stiffness = Vec3::Zero();
  Vec3 force = Vec3::Zero();
  Vec3 target = Vec3::Zero();
};

/// Returns P trajectories, each 6 x (T+1) with column 0 equal to s0.
template <ProbabilisticDynamics Model>
std::vector<Eigen::Matrix<double, kStateDim, Eigen::Dynamic>> trajectory_sampling(
    const Model& model, const CartesianState& s0, std::span<const ActionStep> actions, int particles, Rng& rng) {
  const auto members = static_cast<int>(model.size());
  if (particles < 1 || members < 1 || particles % members != 0) {
    throw DomainError("trajectory_sampling: particle count must be a positive multiple of the ensemble size");
  }
  const int horizon = static_cast<int>(actions.size());
  const int per_member = particles / members;
  std::vector<Eigen::Matrix<double, kStateDim, Eigen::Dynamic>> traj(
      static_cast<std::size_t>(particles), Eigen::Matrix<double, kStateDim, Eigen::Dynamic>(kStateDim, horizon + 1));
  StateBatch cur(kStateDim, particles);
  cur.colwise() = s0.vector();
  for (int p = 0; p < particles; ++p) traj[static_cast<std::size_t>(p)].col(0) = s0.vector();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < horizon; ++t) {
    const auto& a = actions[static_cast<std::size_t>(t)];
    InputBatch in(kInputDim, particles);
    for (int p = 0; p < particles; ++p) {
      in.col(p) << cur.col(p), a.stiffness, a.force, a.target;
    }
    for (int b = 0; b < members; ++b) {
      const GaussianBatch g = model.predict(static_cast<std::size_t>(b), in.middleCols(b * per_member, per_member));
      for (int j = 0; j < per_member; ++j) {
        const int p = b * per_member + j;
        for (int i = 0; i < kStateDim; ++i) {
          const double sd = std::exp(0.5 * g.logvar(i, j));
          const double eps = normal(rng);
          cur(i, p) += g.mean(i, j) + (sd > 0.0 ? sd * eps : 0.0);
        }
      }
    }
    for (int p = 0; p < particles; ++p) traj[static_cast<std::size_t>(p)].col(t + 1) = cur.col(p);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "mpvic.penn";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json to_json_vector(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, Eigen::Index expected, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != expected) throw Error(std::string("checkpoint: bad size for ") + what);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), expected);
}

}  // namespace detail

template <class Scalar>
nlohmann::json checkpoint_json(const EnsembleT<Scalar>& ensemble) {
  if (!ensemble.normalized()) throw Error("checkpoint: ensemble has no normalizers");
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["input_dim"] = kInputDim;
  j["output_dim"] = kStateDim;
  j["hidden"] = ensemble.config().hidden;
  j["activation"] = "silu";
  j["logvar_min_init"] = ensemble.config().logvar_min;
  j["logvar_max_init"] = ensemble.config().logvar_max;
  auto norm = [](const Normalizer& n) {
    return nlohmann::json{{"mean", detail::to_json_vector(n.mean())}, {"std", detail::to_json_vector(n.stddev())}};
  };
  j["input_normalizer"] = norm(ensemble.input_normalizer());
  j["output_normalizer"] = norm(ensemble.output_normalizer());
  j["members"] = nlohmann::json::array();
  for (const auto& m : ensemble.members()) {
    nlohmann::json mj;
    mj["layers"] = nlohmann::json::array();
    for (const auto& l : m.layers()) {
      std::vector<double> w;
      w.reserve(static_cast<std::size_t>(l.weight.size()));
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(static_cast<double>(l.weight(r, c)));
      }
      mj["layers"].push_back({{"rows", l.weight.rows()},
                              {"cols", l.weight.cols()},
                              {"weight", w},
                              {"bias", detail::to_json_vector(l.bias.template cast<double>())}});
    }
    mj["max_logvar"] = detail::to_json_vector(m.max_logvar().template cast<double>());
    mj["min_logvar"] = detail::to_json_vector(m.min_logvar().template cast<double>());
    j["members"].push_back(mj);
  }
  return j;
}

template <class Scalar>
EnsembleT<Scalar> ensemble_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kCheckpointFormat) throw Error("checkpoint: unknown format");
  if (j.value("version", 0) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
  if (j.at("input_dim").get<int>() != kInputDim || j.at("output_dim").get<int>() != kStateDim) {
    throw Error("checkpoint: dimension mismatch");
  }
  EnsembleConfig cfg;
  cfg.hidden = j.at("hidden").get<std::vector<int>>();
  cfg.members = static_cast<int>(j.at("members").size());
  cfg.logvar_min = j.at("logvar_min_init").get<double>();
  cfg.logvar_max = j.at("logvar_max_init").get<double>();
  cfg.validate();
  EnsembleT<Scalar> e;
  std::vector<GaussianMlp<Scalar>> members;
  for (const auto& mj : j.at("members")) {
    GaussianMlp<Scalar> m(kInputDim, kStateDim, cfg.hidden, cfg.logvar_min, cfg.logvar_max);
    const auto& lj = mj.at("layers");
    if (lj.size() != m.layers().size()) throw Error("checkpoint: layer count mismatch");
    for (std::size_t i = 0; i < lj.size(); ++i) {
      auto& layer = m.layers()[i];
      const auto rows = lj[i].at("rows").get<Eigen::Index>();
      const auto cols = lj[i].at("cols").get<Eigen::Index>();
      if (rows != layer.weight.rows() || cols != layer.weight.cols()) throw Error("checkpoint: layer shape mismatch");
      const auto w = lj[i].at("weight").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != rows * cols) throw Error("checkpoint: weight size mismatch");
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) layer.weight(r, c) = static_cast<Scalar>(w[r * cols + c]);
      }
      layer.bias = detail::vector_from_json(lj[i].at("bias"), rows, "bias").template cast<Scalar>();
    }
    m.max_logvar() = detail::vector_from_json(mj.at("max_logvar"), kStateDim, "max_logvar").template cast<Scalar>();
    m.min_logvar() = detail::vector_from_json(mj.at("min_logvar"), kStateDim, "min_logvar").template cast<Scalar>();
    members.push_back(std::move(m));
  }
  e = EnsembleT<Scalar>::from_parts(cfg, std::move(members));
  auto norm = [](const nlohmann::json& nj, Eigen::Index dim) {
    return Normalizer(detail::vector_from_json(nj.at("mean"), dim, "normalizer mean"),
                      detail::vector_from_json(nj.at("std"), dim, "normalizer std"));
  };
  e.set_normalizers(norm(j.at("input_normalizer"), kInputDim), norm(j.at("output_normalizer"), kStateDim));
  return e;
}

template <class Scalar>
void save_checkpoint(const EnsembleT<Scalar>& ensemble, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os << checkpoint_json(ensemble).dump() << '\n';
}

template <class Scalar = float>
EnsembleT<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint: invalid JSON in " + path.string() + ": " + e.what());
  }
  return ensemble_from_json<Scalar>(j);
}

}  // namespace mpvic

#endif  // MPVIC_PENN_HPP_
