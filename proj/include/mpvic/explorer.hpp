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

#ifndef MPVIC_EXPLORER_HPP_
#define MPVIC_EXPLORER_HPP_

#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mpvic/cem.hpp"
#include "mpvic/common.hpp"
#include "mpvic/impedance_dynamics.hpp"
#include "mpvic/penn.hpp"

namespace mpvic {

struct ExplorationConfig {
  int initial_trials = 5;   // random-controller trials
  int trials = 15;          // curiosity-driven trials after the random ones
  int trial_horizon = 100;  // control steps per trial
  double force_range = 20.0;   // N, f_ext ~ U[-r, r] per axis
  double target_range = 0.1;   // m, s_r ~ U[-r, r] per axis
  Vec3 k_min = Vec3::Constant(0.1);
  Vec3 k_max = Vec3::Constant(1000.0);
  int plan_horizon = 5;
  // Smaller than the control planner: a sharper optimizer drives trials to the
  // workspace edge and leaves the interior sparsely covered
  CemConfig cem{.population = 100, .elites = 20, .iterations = 5};
  int probes = 20;
  double probe_velocity_range = 0.5;  // m/s
  double holdout_fraction = 0.1;

  void validate() const {
    if (initial_trials < 1) throw ConfigError("explore.initial_trials must be at least 1");
    if (trials < 0) throw ConfigError("explore.trials must be non-negative");
    if (trial_horizon < 1) throw ConfigError("explore.trial_horizon must be at least 1");
    if (!(force_range >= 0.0) || !(target_range >= 0.0)) throw ConfigError("explore ranges must be non-negative");
    if (!k_min.allFinite() || !k_max.allFinite() || (k_min.array() <= 0.0).any() ||
        (k_max.array() < k_min.array()).any()) {
      throw ConfigError("explore stiffness bounds must satisfy 0 < k_min <= k_max");
    }
    if (plan_horizon < 1) throw ConfigError("explore.plan_horizon must be at least 1");
    if (probes < 1) throw ConfigError("explore.probes must be at least 1");
    if (!(probe_velocity_range >= 0.0)) throw ConfigError("explore.probe_velocity_range must be non-negative");
    cem.validate();
  }
};

/// Excitation held over one control step.
struct Excitation {
  Vec3 force = Vec3::Zero();
  Vec3 target = Vec3::Zero();
};

inline Excitation draw_excitation(const ExplorationConfig& config, Rng& rng) {
  return {uniform_vec3(rng, Vec3::Constant(-config.force_range), Vec3::Constant(config.force_range)),
          uniform_vec3(rng, Vec3::Constant(-config.target_range), Vec3::Constant(config.target_range))};
}

/// Advances the bare plant one control period under constant K, f and s_r.
inline CartesianState advance_control_period(const CartesianState& s, const Vec3& stiffness, const Vec3& force,
                                             const Vec3& target, const PlantConfig& plant) {
  const ImpedanceParams params = make_impedance(stiffness, plant.mass);
  CartesianState next = s;
  const int steps = plant.plant_steps_per_control();
  for (int i = 0; i < steps; ++i) {
    next = step_closed_loop(next, params, target, force, plant.dt, plant.max_substep, plant.workspace_radius);
  }
  return next;
}

/// Chooses the stiffness for one step of a trial given the current state and
/// the excitation drawn for it.
using StiffnessPolicy = std::function<Vec3(const CartesianState&, const Excitation&, Rng&)>;

struct TrialResult {
  std::vector<Transition> transitions;
  bool truncated = false;
  std::string reason;
};

/// Runs one exploration trial from rest at the origin. A workspace violation
/// or non-finite state ends the trial; the transitions so far are kept.
inline TrialResult run_trial(int trial, const ExplorationConfig& config, const PlantConfig& plant,
                             const StiffnessPolicy& policy, Rng& rng) {
  TrialResult out;
  CartesianState s;
  for (int k = 0; k < config.trial_horizon; ++k) {
    const Excitation ex = draw_excitation(config, rng);
    const Vec3 stiffness = policy(s, ex, rng).cwiseMax(config.k_min).cwiseMin(config.k_max);
    Transition t;
    t.trial = trial;
    t.state = s;
    t.stiffness = stiffness;
    t.force = ex.force;
    t.target = ex.target;
    try {
      t.next = advance_control_period(s, stiffness, ex.force, ex.target, plant);
    } catch (const WorkspaceError& e) {
      out.truncated = true;
      out.reason = e.what();
      break;
    } catch (const NonFiniteError& e) {
      out.truncated = true;
      out.reason = e.what();
      break;
    }
    out.transitions.push_back(t);
    s = t.next;
  }
  return out;
}

/// Random controller: K ~ U[k_min, k_max] per axis and step.
inline TrialResult random_trial(int trial, const ExplorationConfig& config, const PlantConfig& plant, Rng& rng) {
  const StiffnessPolicy policy = [&config](const CartesianState&, const Excitation&, Rng& r) {
    return uniform_vec3(r, config.k_min, config.k_max);
  };
  return run_trial(trial, config, plant, policy, rng);
}

/// -sum_t rho(s_t, u_t) along the ensemble-mean rollout, one value per
/// candidate. Each candidate is a T x 3 stiffness sequence; force and target
/// are held over the horizon.
template <ProbabilisticDynamics Model>
std::vector<double> curiosity_cost_batch(const Model& model, const CartesianState& s,
                                         std::span<const Eigen::MatrixXd> stiffness, const Vec3& force,
                                         const Vec3& target) {
  const std::size_t members = model.size();
  if (members < 2) throw DomainError("curiosity_cost: needs at least two ensemble members");
  const auto n = static_cast<Eigen::Index>(stiffness.size());
  std::vector<double> cost(stiffness.size(), 0.0);
  if (n == 0) return cost;
  const Eigen::Index horizon = stiffness[0].rows();
  StateBatch cur(kStateDim, n);
  cur.colwise() = s.vector();
  InputBatch in(kInputDim, n);
  std::vector<StateBatch> means(members);
  for (Eigen::Index t = 0; t < horizon; ++t) {
    for (Eigen::Index j = 0; j < n; ++j) {
      in.col(j) << cur.col(j), stiffness[static_cast<std::size_t>(j)].row(t).transpose(), force, target;
    }
    StateBatch avg = StateBatch::Zero(kStateDim, n);
    for (std::size_t b = 0; b < members; ++b) {
      means[b] = model.predict(b, in).mean;
      avg += means[b];
    }
    avg /= static_cast<double>(members);
    const Eigen::VectorXd rho = member_variance(means);
    for (Eigen::Index j = 0; j < n; ++j) cost[static_cast<std::size_t>(j)] -= rho[j];
    cur += avg;
  }
  return cost;
}

template <ProbabilisticDynamics Model>
double curiosity_cost(const Model& model, const CartesianState& s, std::span<const ActionStep> actions) {
  const std::size_t members = model.size();
  if (members < 2) throw DomainError("curiosity_cost: needs at least two ensemble members");
  CartesianState cur = s;
  double cost = 0.0;
  for (const auto& a : actions) {
    InputBatch in = model_input(cur, a.stiffness, a.force, a.target);
    Vec6 avg = Vec6::Zero();
    std::vector<StateBatch> means;
    for (std::size_t b = 0; b < members; ++b) {
      means.push_back(model.predict(b, in).mean);
      avg += means.back().col(0);
    }
    avg /= static_cast<double>(members);
    cost -= member_variance(means)[0];
    cur = CartesianState::from_vector(cur.vector() + avg);
  }
  return cost;
}

/// First stiffness of the CEM sequence minimizing the curiosity cost.
template <ProbabilisticDynamics Model>
Vec3 plan_curious_stiffness(const Model& model, const CartesianState& s, const Excitation& ex,
                            const ExplorationConfig& config, Rng& rng) {
  const auto dist =
      SequenceDistribution::initial(config.plan_horizon, config.k_min, config.k_max, config.cem.initial_std_fraction);
  auto cost = [&](std::span<const ActionSequence> seqs) {
    return curiosity_cost_batch(model, s, seqs, ex.force, ex.target);
  };
  const CemResult r = optimize(cost, dist, config.cem, rng);
  return r.best.row(0).transpose();
}

/// Fixed probe inputs for tracking epistemic uncertainty across rounds.
inline InputBatch make_probe_set(const ExplorationConfig& config, Rng& rng) {
  InputBatch probes(kInputDim, config.probes);
  const Vec3 r = Vec3::Constant(config.target_range);
  const Vec3 v = Vec3::Constant(config.probe_velocity_range);
  const Vec3 f = Vec3::Constant(config.force_range);
  for (int j = 0; j < config.probes; ++j) {
    probes.col(j) << uniform_vec3(rng, -r, r), uniform_vec3(rng, -v, v), uniform_vec3(rng, config.k_min, config.k_max),
        uniform_vec3(rng, -f, f), uniform_vec3(rng, -r, r);
  }
  return probes;
}

/// Root mean square one-step position error of the ensemble-mean prediction
/// over the given transitions (per component).
template <ProbabilisticDynamics Model>
double position_rmse(const Model& model, const Dataset& data, std::span<const std::size_t> idx) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  const InputBatch in = data.inputs(idx);
  const StateBatch truth = data.deltas(idx);
  StateBatch avg = StateBatch::Zero(kStateDim, in.cols());
  for (std::size_t b = 0; b < model.size(); ++b) avg += model.predict(b, in).mean;
  avg /= static_cast<double>(model.size());
  const double sq = (avg.topRows<3>() - truth.topRows<3>()).squaredNorm();
  return std::sqrt(sq / (3.0 * static_cast<double>(in.cols())));
}

struct ExplorationRound {
  int round = 0;             // 0 trains on the random trials only
  std::size_t dataset_size = 0;
  double train_nll = 0.0;    // last epoch
  double holdout_nll = 0.0;  // last epoch
  double probe_rho = 0.0;    // mean over the probe set after training
  int truncated_trials = 0;  // cumulative
};

struct ExplorationReport {
  std::vector<ExplorationRound> rounds;
  std::vector<TrainingReport> training;
  std::vector<std::string> warnings;

  static constexpr const char* kCsvHeader = "round,dataset_size,train_nll,holdout_nll,probe_rho,truncated_trials";

  void write_csv(std::ostream& os) const {
    os << kCsvHeader << '\n';
    for (const auto& r : rounds) {
      os << r.round << ',' << r.dataset_size << ',' << format_double(r.train_nll) << ','
         << format_double(r.holdout_nll) << ',' << format_double(r.probe_rho) << ',' << r.truncated_trials << '\n';
    }
  }
};

template <class Scalar>
struct ExplorationResult {
  EnsembleT<Scalar> ensemble;
  Dataset dataset;
  ExplorationReport report;
};

/// Random trials, then `trials` rounds of (train on all data, run a trial with
/// CEM-planned stiffness maximizing the predicted epistemic uncertainty). A
/// final training pass makes the returned model use every transition.
/// Training failures propagate as TrainingError; `on_round` sees the dataset
/// after every round so callers can persist it.
template <class Scalar = float>
ExplorationResult<Scalar> explore_and_learn(
    const ExplorationConfig& config, const PlantConfig& plant, const EnsembleConfig& model_config,
    const TrainConfig& train_config, Rng& rng,
    const std::function<void(const ExplorationRound&, const Dataset&)>& on_round = {}) {
  config.validate();
  plant.validate();
  Rng probe_rng(derive_seed(rng(), 2));
  const InputBatch probes = make_probe_set(config, probe_rng);

  ExplorationResult<Scalar> out{EnsembleT<Scalar>(model_config, rng), Dataset(config.holdout_fraction), {}};
  int truncated = 0;
  int trial_id = 0;
  auto record = [&](const TrialResult& r) {
    out.dataset.append(std::span<const Transition>(r.transitions));
    if (r.truncated) {
      ++truncated;
      out.report.warnings.push_back("trial " + std::to_string(trial_id) + " truncated: " + r.reason);
    }
    ++trial_id;
  };
  for (int i = 0; i < config.initial_trials; ++i) record(random_trial(trial_id, config, plant, rng));

  auto train_round = [&](int round) {
    TrainingReport tr = train(out.ensemble, out.dataset, train_config, rng, round);
    ExplorationRound r;
    r.round = round;
    r.dataset_size = out.dataset.size();
    if (!tr.epochs.empty()) {
      r.train_nll = tr.epochs.back().train_nll;
      r.holdout_nll = tr.epochs.back().holdout_nll;
    }
    r.probe_rho = predict_uncertainty_batch(out.ensemble, probes).mean();
    r.truncated_trials = truncated;
    out.report.training.push_back(std::move(tr));
    out.report.rounds.push_back(r);
    if (on_round) on_round(r, out.dataset);
  };

  for (int k = 0; k < config.trials; ++k) {
    train_round(k);
    const auto& model = out.ensemble;
    const StiffnessPolicy policy = [&](const CartesianState& s, const Excitation& ex, Rng& r) {
      return plan_curious_stiffness(model, s, ex, config, r);
    };
    record(run_trial(trial_id, config, plant, policy, rng));
  }
  train_round(config.trials);
  return out;
}

}  // namespace mpvic

#endif  // MPVIC_EXPLORER_HPP_
