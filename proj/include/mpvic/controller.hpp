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

// Model predictive variable impedance control: every control step a CEM
// search over stiffness sequences is scored on particle rollouts of a learned
// (or analytic) model, and the first stiffness of the best sequence is
// executed with critical damping D = 2 sqrt(K).

#ifndef MPVIC_CONTROLLER_HPP_
#define MPVIC_CONTROLLER_HPP_

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mpvic/cem.hpp"
#include "mpvic/common.hpp"
#include "mpvic/impedance_dynamics.hpp"
#include "mpvic/penn.hpp"

namespace mpvic {

struct CostWeights {
  Vec6 q_base = (Vec6() << 1e8, 1e8, 1e8, 0.0, 0.0, 0.0).finished();
  Vec3 r_base = Vec3::Ones();
  double alpha_q = 1.0;
  double alpha_r = 0.1;
  bool schedule_q = true;  // Q scaled linearly with the position error norm

  void validate() const {
    if (!q_base.allFinite() || (q_base.array() < 0.0).any()) throw ConfigError("weights.q_base must be >= 0");
    if (!r_base.allFinite() || (r_base.array() < 0.0).any()) throw ConfigError("weights.r_base must be >= 0");
    if (!(alpha_q >= 0.0 && alpha_r >= 0.0)) throw ConfigError("weights.alpha_q/alpha_r must be >= 0");
  }
};

struct MpcConfig {
  int horizon = 5;
  int particles = 5;
  CemConfig cem;
  Vec3 k_min = Vec3::Constant(0.1);
  Vec3 k_max = Vec3::Constant(1000.0);
  // Axes with a value are held at that stiffness and excluded from the search.
  std::array<std::optional<double>, 3> fixed_stiffness{};

  std::vector<int> free_axes() const {
    std::vector<int> axes;
    for (int i = 0; i < 3; ++i) {
      if (!fixed_stiffness[static_cast<std::size_t>(i)]) axes.push_back(i);
    }
    return axes;
  }

  void validate() const {
    if (horizon < 1) throw ConfigError("mpc.horizon must be at least 1");
    if (particles < 1) throw ConfigError("mpc.particles must be positive");
    cem.validate();
    if (!k_min.allFinite() || !k_max.allFinite() || (k_min.array() <= 0.0).any() ||
        (k_max.array() < k_min.array()).any()) {
      throw ConfigError("mpc stiffness bounds must satisfy 0 < k_min <= k_max");
    }
    for (const auto& f : fixed_stiffness) {
      if (f && !(*f > 0.0)) throw ConfigError("mpc.fixed_stiffness entries must be positive");
    }
    if (free_axes().empty()) throw ConfigError("mpc: at least one stiffness axis must be free");
  }
};

/// Eigenvalues of a diagonal stiffness matrix, ascending.
inline Vec3 stiffness_eigenvalues(const Vec3& stiffness) {
  Vec3 v = stiffness;
  std::sort(v.data(), v.data() + 3);
  return v;
}

/// C = ds' Q ds + lambda(K)' R lambda(K) with ds = [s_r - pos, -vel].
/// For a diagonal K the eigenvalue of axis i is K_i, so R_i pairs with K_i.
inline double step_cost(const Vec6& state, const Vec3& target, const Vec3& stiffness, const CostWeights& w) {
  Vec6 ds;
  ds << target - state.head<3>(), -state.tail<3>();
  double q_scale = w.alpha_q;
  if (w.schedule_q) q_scale *= ds.head<3>().norm();
  const double tracking = q_scale * (w.q_base.array() * ds.array().square()).sum();
  const double compliance = w.alpha_r * (w.r_base.array() * stiffness.array().square()).sum();
  return tracking + compliance;
}

inline double step_cost(const CartesianState& s, const Vec3& target, const Vec3& stiffness, const CostWeights& w) {
  return step_cost(s.vector(), target, stiffness, w);
}

/// Mean over particles of the summed step costs; trajectories are 6 x (T+1)
/// and state t+1 is paired with stiffness row t. Any non-finite particle makes
/// the whole sequence rank worst (+inf).
inline double trajectory_cost(std::span<const Eigen::Matrix<double, kStateDim, Eigen::Dynamic>> particles,
                              const Eigen::MatrixXd& stiffness_seq, const Vec3& target, const CostWeights& w) {
  if (particles.empty()) throw DomainError("trajectory_cost: no particles");
  double total = 0.0;
  for (const auto& traj : particles) {
    if (traj.cols() != stiffness_seq.rows() + 1) throw DomainError("trajectory_cost: length mismatch");
    if (!traj.allFinite()) return std::numeric_limits<double>::infinity();
    double c = 0.0;
    for (Eigen::Index t = 0; t < stiffness_seq.rows(); ++t) {
      c += step_cost(Vec6(traj.col(t + 1)), target, Vec3(stiffness_seq.row(t).transpose()), w);
    }
    total += c;
  }
  const double mean = total / static_cast<double>(particles.size());
  return std::isfinite(mean) ? mean : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Analytic single-member model with zero predicted variance

/// Wraps the true plant as a deterministic one-member model.
class AnalyticModel {
 public:
  explicit AnalyticModel(PlantConfig plant = {}) : plant_(plant) {}

  std::size_t size() const { return 1; }

  GaussianBatch predict(std::size_t /*member*/, const InputBatch& inputs) const {
    GaussianBatch g;
    g.mean.resize(kStateDim, inputs.cols());
    g.logvar = StateBatch::Constant(kStateDim, inputs.cols(), -std::numeric_limits<double>::infinity());
    const double period = plant_.control_period;
    const int n = plant_.substeps(period);
    const double h = period / n;
    for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
      CartesianState s{inputs.col(j).segment<3>(0), inputs.col(j).segment<3>(3)};
      const Vec3 k = inputs.col(j).segment<3>(6).cwiseMax(0.0);
      const ImpedanceParams p{plant_.mass, 2.0 * k.array().sqrt(), k};
      const Vec3 f = inputs.col(j).segment<3>(9);
      const Vec3 target = inputs.col(j).segment<3>(12);
      const Vec6 s0 = s.vector();
      for (int i = 0; i < n; ++i) detail::integrate_substep(s, p, target, f, h);
      g.mean.col(j) = s.vector() - s0;
    }
    return g;
  }

  const PlantConfig& plant() const { return plant_; }

 private:
  PlantConfig plant_;
};

// ---------------------------------------------------------------------------
// MPC step

/// Expands free-axis sequences (T x A) to full 3-axis stiffness (T x 3).
inline Eigen::MatrixXd expand_stiffness(const ActionSequence& free_seq, const MpcConfig& config) {
  const auto axes = config.free_axes();
  Eigen::MatrixXd full(free_seq.rows(), 3);
  for (int i = 0; i < 3; ++i) {
    if (const auto& f = config.fixed_stiffness[static_cast<std::size_t>(i)]) full.col(i).setConstant(*f);
  }
  for (std::size_t a = 0; a < axes.size(); ++a) full.col(axes[a]) = free_seq.col(static_cast<Eigen::Index>(a));
  return full;
}

inline SequenceDistribution initial_distribution(const MpcConfig& config) {
  const auto axes = config.free_axes();
  Eigen::VectorXd lo(static_cast<Eigen::Index>(axes.size())), hi(static_cast<Eigen::Index>(axes.size()));
  for (std::size_t a = 0; a < axes.size(); ++a) {
    lo[static_cast<Eigen::Index>(a)] = config.k_min[axes[a]];
    hi[static_cast<Eigen::Index>(a)] = config.k_max[axes[a]];
  }
  return SequenceDistribution::initial(config.horizon, lo, hi, config.cem.initial_std_fraction);
}

/// Batch cost of candidate stiffness sequences via trajectory sampling.
template <ProbabilisticDynamics Model>
std::vector<double> score_stiffness_sequences(const Model& model, const CartesianState& s, const Vec3& force,
                                              const Vec3& target, std::span<const ActionSequence> free_seqs,
                                              const MpcConfig& config, const CostWeights& weights, Rng& rng) {
  std::vector<Eigen::MatrixXd> full;
  full.reserve(free_seqs.size());
  for (const auto& q : free_seqs) full.push_back(expand_stiffness(q, config));
  const ParticleRollout roll =
      propagate_particles(model, s, std::span<const Eigen::MatrixXd>(full), force, target, config.particles, rng);
  const int n_seq = roll.sequences, particles = roll.particles;
  std::vector<double> costs(static_cast<std::size_t>(n_seq), 0.0);
  for (int n = 0; n < n_seq; ++n) {
    double total = 0.0;
    for (int p = 0; p < particles && std::isfinite(total); ++p) {
      const int col = p * n_seq + n;
      for (int t = 0; t < config.horizon; ++t) {
        const auto& st = roll.states[static_cast<std::size_t>(t + 1)];
        if (!st.col(col).allFinite()) {
          total = std::numeric_limits<double>::infinity();
          break;
        }
        total += step_cost(Vec6(st.col(col)), target, Vec3(full[static_cast<std::size_t>(n)].row(t).transpose()),
                           weights);
      }
    }
    const double mean = total / particles;
    costs[static_cast<std::size_t>(n)] = std::isfinite(mean) ? mean : std::numeric_limits<double>::infinity();
  }
  return costs;
}

struct MpcDiagnostics {
  std::vector<CemIterationStats> iterations;
  Vec3 stiffness = Vec3::Zero();
  double best_cost = 0.0;
  bool fallback = false;
  std::string message;
  double wall_time = 0.0;  // seconds
};

struct MpcStepResult {
  Vec3 stiffness = Vec3::Zero();
  SequenceDistribution distribution;  // for warm-starting the next step
  Eigen::MatrixXd best_sequence;      // T x 3
  MpcDiagnostics diagnostics;
};

/// One receding-horizon step. `previous` is last step's returned
/// distribution (shifted here) or empty on the first step.
template <ProbabilisticDynamics Model>
MpcStepResult mpc_step(const Model& model, const CartesianState& s, const Vec3& force, const Vec3& target,
                       const std::optional<SequenceDistribution>& previous, const MpcConfig& config,
                       const CostWeights& weights, const Vec3& previous_stiffness, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  const SequenceDistribution init = initial_distribution(config);
  const SequenceDistribution dist = previous ? previous->shifted(init.var) : init;
  MpcStepResult out;
  auto finish = [&] {
    out.diagnostics.stiffness = out.stiffness;
    out.diagnostics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  };
  auto fallback = [&](const std::string& why) {
    out.stiffness = previous_stiffness.cwiseMax(config.k_min).cwiseMin(config.k_max);
    for (int i = 0; i < 3; ++i) {
      if (const auto& f = config.fixed_stiffness[static_cast<std::size_t>(i)]) out.stiffness[i] = *f;
    }
    out.distribution = dist;
    out.best_sequence = out.stiffness.transpose().replicate(config.horizon, 1);
    out.diagnostics.fallback = true;
    out.diagnostics.message = why;
    out.diagnostics.best_cost = std::numeric_limits<double>::infinity();
    return finish();
  };
  if (!s.finite() || !force.allFinite() || !target.allFinite()) return fallback("non-finite controller input");
  CemResult cem;
  try {
    auto cost = [&](std::span<const ActionSequence> seqs) {
      return score_stiffness_sequences(model, s, force, target, seqs, config, weights, rng);
    };
    cem = optimize(cost, dist, config.cem, rng);
  } catch (const Error& e) {
    return fallback(std::string("model inference failed: ") + e.what());
  }
  if (!std::isfinite(cem.best_cost)) return fallback("all candidate sequences had non-finite cost");
  out.best_sequence = expand_stiffness(cem.best, config);
  out.stiffness = out.best_sequence.row(0).transpose().cwiseMax(config.k_min).cwiseMin(config.k_max);
  for (int i = 0; i < 3; ++i) {
    if (const auto& f = config.fixed_stiffness[static_cast<std::size_t>(i)]) out.stiffness[i] = *f;
  }
  out.distribution = cem.distribution;
  out.diagnostics.iterations = cem.iterations;
  out.diagnostics.best_cost = cem.best_cost;
  if (!cem.warnings.empty()) out.diagnostics.message = cem.warnings.front();
  return finish();
}

// ---------------------------------------------------------------------------
// Controllers and episodes

struct ControlDecision {
  Vec3 stiffness = Vec3::Zero();
  std::optional<MpcDiagnostics> diagnostics;
};

template <class C>
concept StiffnessController = requires(C c, const CartesianState& s, const Vec3& v, Rng& rng) {
  c.reset();
  { c.decide(s, v, v, rng) } -> std::same_as<ControlDecision>;
};

/// Adaptive stiffness via MPC over a probabilistic model.
template <ProbabilisticDynamics Model>
class MpvicController {
 public:
  MpvicController(const Model& model, MpcConfig config, CostWeights weights)
      : model_(&model), config_(std::move(config)), weights_(weights) {
    config_.validate();
    weights_.validate();
    reset();
  }

  void reset() {
    previous_.reset();
    last_ = config_.k_min;
    for (int i = 0; i < 3; ++i) {
      if (const auto& f = config_.fixed_stiffness[static_cast<std::size_t>(i)]) last_[i] = *f;
    }
  }

  ControlDecision decide(const CartesianState& s, const Vec3& force, const Vec3& target, Rng& rng) {
    MpcStepResult r = mpc_step(*model_, s, force, target, previous_, config_, weights_, last_, rng);
    previous_ = std::move(r.distribution);
    last_ = r.stiffness;
    return {r.stiffness, std::move(r.diagnostics)};
  }

  const MpcConfig& config() const { return config_; }
  const CostWeights& weights() const { return weights_; }

 private:
  const Model* model_;
  MpcConfig config_;
  CostWeights weights_;
  std::optional<SequenceDistribution> previous_;
  Vec3 last_;
};

/// Constant stiffness with critical damping (comparison anchor).
class FixedStiffnessController {
 public:
  explicit FixedStiffnessController(Vec3 stiffness) : stiffness_(std::move(stiffness)) {
    if (!stiffness_.allFinite() || (stiffness_.array() <= 0.0).any()) {
      throw DomainError("fixed stiffness must be positive");
    }
  }
  void reset() {}
  ControlDecision decide(const CartesianState&, const Vec3&, const Vec3&, Rng&) { return {stiffness_, std::nullopt}; }

 private:
  Vec3 stiffness_;
};

struct EpisodeRow {
  double t = 0.0;
  CartesianState state;
  Vec3 stiffness = Vec3::Zero();
  Vec3 force = Vec3::Zero();
  double cost = 0.0;
  bool operator==(const EpisodeRow&) const = default;
};

struct ObjectRow {
  double t = 0.0;
  Vec3 position = Vec3::Zero();
  double velocity = 0.0;
  double target_distance = 0.0;
  bool operator==(const ObjectRow&) const = default;
};

struct EpisodeLog {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<EpisodeRow> rows;
  std::vector<ObjectRow> object;                // push task only
  std::vector<ImpactEvent> impacts;             // falling task only
  double object_mass = 0.0;                     // push task only
  std::vector<MpcDiagnostics> diagnostics;      // one per control step for MPC controllers
  bool terminated = false;
  std::string termination_reason;

  static constexpr const char* kCsvHeader = "t,x,y,z,vx,vy,vz,Kx,Ky,Kz,fx,fy,fz,cost";

  void write_csv(std::ostream& os) const {
    os << kCsvHeader << '\n';
    for (const auto& r : rows) {
      os << format_double(r.t);
      auto put = [&os](const Vec3& v) {
        for (int i = 0; i < 3; ++i) os << ',' << format_double(v[i]);
      };
      put(r.state.pos);
      put(r.state.vel);
      put(r.stiffness);
      put(r.force);
      os << ',' << format_double(r.cost) << '\n';
    }
  }

  static constexpr const char* kObjectCsvHeader = "t,object_x,object_y,object_z,object_velocity,target_distance";

  void write_object_csv(std::ostream& os) const {
    os << kObjectCsvHeader << '\n';
    for (const auto& o : object) {
      os << format_double(o.t) << ',' << format_double(o.position.x()) << ',' << format_double(o.position.y())
         << ',' << format_double(o.position.z()) << ',' << format_double(o.velocity) << ','
         << format_double(o.target_distance) << '\n';
    }
  }

  static constexpr const char* kDiagnosticsHeader =
      "step,t,iteration,best_cost,best_so_far,elite_mean_cost,non_finite,Kx,Ky,Kz,fallback";

  void write_diagnostics_csv(std::ostream& os, bool with_wall_time = false) const {
    os << kDiagnosticsHeader << (with_wall_time ? ",wall_time_s" : "") << '\n';
    for (std::size_t k = 0; k < diagnostics.size() && k < rows.size(); ++k) {
      const auto& d = diagnostics[k];
      auto line = [&](int iteration, double best, double so_far, double elite, int nf) {
        os << k << ',' << format_double(rows[k].t) << ',' << iteration << ',' << format_double(best) << ','
           << format_double(so_far) << ',' << format_double(elite) << ',' << nf << ','
           << format_double(d.stiffness.x()) << ',' << format_double(d.stiffness.y()) << ','
           << format_double(d.stiffness.z()) << ',' << (d.fallback ? 1 : 0);
        if (with_wall_time) os << ',' << format_double(d.wall_time);
        os << '\n';
      };
      if (d.iterations.empty()) line(-1, d.best_cost, d.best_cost, d.best_cost, 0);
      for (const auto& it : d.iterations) {
        line(it.iteration, it.best_cost, it.best_so_far, it.elite_mean_cost, it.non_finite);
      }
    }
  }
};

/// Runs one episode: at each control step read state and force, choose K,
/// set D = 2 sqrt(K) and advance the plant one control period.
template <StiffnessController Controller>
EpisodeLog run_episode(const TaskEnv& env, const PlantConfig& plant, Controller& controller, const CostWeights& weights,
                       std::uint64_t seed) {
  Rng env_rng(derive_seed(seed, 0));
  Rng ctrl_rng(derive_seed(seed, 1));
  TaskSimulation sim(env, plant, env_rng);
  controller.reset();
  EpisodeLog log;
  log.task = env.name;
  log.seed = seed;
  const int steps = env.horizon(plant);
  const auto* push = std::get_if<PushObject>(&env.variant);
  const Vec3 object_goal = push ? Vec3(env.start + push->push_delta) : Vec3::Zero();
  if (push) log.object_mass = sim.object_mass();
  for (int k = 0; k < steps; ++k) {
    const CartesianState s = sim.state();
    const Vec3 f = sim.sensed_force();
    const Vec3 target = sim.target();
    ControlDecision d = controller.decide(s, f, target, ctrl_rng);
    EpisodeRow row;
    row.t = sim.time();
    row.state = s;
    row.stiffness = d.stiffness;
    row.force = f;
    row.cost = step_cost(s, target, d.stiffness, weights);
    log.rows.push_back(row);
    if (push) {
      const Vec3 p = sim.object_world_position();
      log.object.push_back({sim.time(), p, sim.object().velocity, (p - object_goal).norm()});
    }
    if (d.diagnostics) log.diagnostics.push_back(std::move(*d.diagnostics));
    try {
      sim.advance(make_impedance(d.stiffness, plant.mass));
    } catch (const WorkspaceError& e) {
      log.terminated = true;
      log.termination_reason = e.what();
      break;
    } catch (const NonFiniteError& e) {
      log.terminated = true;
      log.termination_reason = e.what();
      break;
    }
  }
  log.impacts = sim.impacts();
  return log;
}

}  // namespace mpvic

#endif  // MPVIC_CONTROLLER_HPP_
