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

#ifndef MPVIC_CEM_HPP_
#define MPVIC_CEM_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mpvic/common.hpp"

namespace mpvic {

/// T x A action sequence.
using ActionSequence = Eigen::MatrixXd;

struct CemConfig {
  int population = 200;
  int elites = 40;
  // Weight of the elite statistics in the smoothed update; 0.9 keeps 0.1 of
  // the previous distribution.
  double learning_rate = 0.9;
  int iterations = 10;
  double initial_std_fraction = 0.25;  // initial std = fraction * (hi - lo)
  int max_resample = 10;

  void validate() const {
    if (population < 1) throw ConfigError("cem.population must be positive");
    if (elites < 1 || elites > population) throw ConfigError("cem.elites must lie in [1, population]");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ConfigError("cem.learning_rate must lie in (0, 1]");
    if (iterations < 1) throw ConfigError("cem.iterations must be at least 1");
    if (!(initial_std_fraction >= 0.0)) throw ConfigError("cem.initial_std_fraction must be non-negative");
    if (max_resample < 0) throw ConfigError("cem.max_resample must be non-negative");
  }
};

/// Per-timestep diagonal Gaussian over bounded action sequences.
struct SequenceDistribution {
  Eigen::MatrixXd mean;  // T x A
  Eigen::MatrixXd var;   // T x A
  Eigen::VectorXd lo;    // A
  Eigen::VectorXd hi;    // A

  int horizon() const { return static_cast<int>(mean.rows()); }
  int action_dim() const { return static_cast<int>(mean.cols()); }

  /// Centered in the box with variance (fraction * (hi - lo))^2.
  static SequenceDistribution initial(int horizon, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                                      double std_fraction = 0.25) {
    SequenceDistribution d;
    d.lo = lo;
    d.hi = hi;
    d.mean = ((lo + hi) / 2.0).transpose().replicate(horizon, 1);
    d.var = (std_fraction * (hi - lo)).array().square().matrix().transpose().replicate(horizon, 1);
    d.validate();
    return d;
  }

  Eigen::MatrixXd initial_var(double std_fraction) const {
    return (std_fraction * (hi - lo)).array().square().matrix().transpose().replicate(horizon(), 1);
  }

  /// Receding-horizon warm start: drop the first step, repeat the last, and
  /// reset the variance.
  SequenceDistribution shifted(const Eigen::MatrixXd& reset_var) const {
    SequenceDistribution d = *this;
    const int t = horizon();
    if (t > 1) d.mean.topRows(t - 1) = mean.bottomRows(t - 1).eval();
    d.var = reset_var;
    return d;
  }

  void validate() const {
    if (mean.rows() < 1 || mean.cols() < 1) throw DomainError("sequence distribution needs T >= 1 and A >= 1");
    if (var.rows() != mean.rows() || var.cols() != mean.cols()) throw DomainError("mean/var shape mismatch");
    if (lo.size() != mean.cols() || hi.size() != mean.cols()) throw DomainError("bounds dimension mismatch");
    if (!mean.allFinite() || !var.allFinite()) throw DomainError("distribution must be finite");
    if ((var.array() < 0.0).any()) throw DomainError("variance must be non-negative");
    if ((lo.array() > hi.array()).any()) throw DomainError("lower bound above upper bound");
    for (Eigen::Index a = 0; a < mean.cols(); ++a) {
      if ((mean.col(a).array() < lo[a] - 1e-12).any() || (mean.col(a).array() > hi[a] + 1e-12).any()) {
        throw DomainError("distribution mean outside bounds");
      }
    }
  }
};

/// Truncated Gaussian draws: resample out-of-box entries up to
/// `max_resample` times, then clip.
inline std::vector<ActionSequence> sample_population(const SequenceDistribution& dist, int population, Rng& rng,
                                                     int max_resample = 10) {
  dist.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  const int t_len = dist.horizon(), a_len = dist.action_dim();
  std::vector<ActionSequence> out(static_cast<std::size_t>(population), ActionSequence(t_len, a_len));
  for (auto& seq : out) {
    for (int t = 0; t < t_len; ++t) {
      for (int a = 0; a < a_len; ++a) {
        const double lo = dist.lo[a], hi = dist.hi[a];
        const double mu = dist.mean(t, a), sd = std::sqrt(dist.var(t, a));
        double x = mu + sd * normal(rng);
        for (int k = 0; k < max_resample && (x < lo || x > hi); ++k) x = mu + sd * normal(rng);
        seq(t, a) = std::clamp(x, lo, hi);
      }
    }
  }
  return out;
}

/// Indices of the `count` lowest costs; non-finite costs rank last, ties by index.
inline std::vector<int> elite_indices(std::span<const double> costs, int count) {
  std::vector<int> idx(costs.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](int i) {
    const double c = costs[static_cast<std::size_t>(i)];
    return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
  };
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return key(a) < key(b); });
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

inline SequenceDistribution update_distribution(const SequenceDistribution& dist,
                                                std::span<const ActionSequence> samples,
                                                std::span<const double> costs, const CemConfig& config) {
  if (samples.size() != costs.size()) throw DomainError("update_distribution: samples/costs size mismatch");
  if (samples.size() < static_cast<std::size_t>(config.elites)) {
    throw DomainError("update_distribution: fewer samples than elites");
  }
  const auto elites = elite_indices(costs, config.elites);
  Eigen::MatrixXd elite_mean = Eigen::MatrixXd::Zero(dist.horizon(), dist.action_dim());
  for (int i : elites) elite_mean += samples[static_cast<std::size_t>(i)];
  elite_mean /= static_cast<double>(elites.size());
  Eigen::MatrixXd elite_var = Eigen::MatrixXd::Zero(dist.horizon(), dist.action_dim());
  for (int i : elites) elite_var += (samples[static_cast<std::size_t>(i)] - elite_mean).cwiseAbs2();
  elite_var /= static_cast<double>(elites.size());

  const double lr = config.learning_rate;
  SequenceDistribution next = dist;
  next.mean = (1.0 - lr) * dist.mean + lr * elite_mean;
  next.var = ((1.0 - lr) * dist.var + lr * elite_var).cwiseMax(0.0);
  for (Eigen::Index a = 0; a < next.mean.cols(); ++a) {
    next.mean.col(a) = next.mean.col(a).cwiseMax(dist.lo[a]).cwiseMin(dist.hi[a]);
  }
  return next;
}

struct CemIterationStats {
  int iteration = 0;
  double best_cost = 0.0;      // best sampled in this iteration
  double best_so_far = 0.0;    // monotone non-increasing
  double elite_mean_cost = 0.0;
  int non_finite = 0;
};

struct CemResult {
  ActionSequence best;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<CemIterationStats> iterations;
  SequenceDistribution distribution;  // after the last update
  std::vector<std::string> warnings;
};

/// Scores a whole population at once.
template <class F>
concept BatchCost = requires(F f, std::span<const ActionSequence> s) {
  { f(s) } -> std::convertible_to<std::vector<double>>;
};

/// Adapts a per-sequence cost to a batch cost.
template <class F>
auto per_sequence(F f) {
  return [f = std::move(f)](std::span<const ActionSequence> seqs) {
    std::vector<double> costs;
    costs.reserve(seqs.size());
    for (const auto& s : seqs) costs.push_back(f(s));
    return costs;
  };
}

/// Sample / score / refit for `iterations` rounds, tracking the best sequence
/// ever sampled.
template <BatchCost F>
CemResult optimize(F&& cost, SequenceDistribution dist, const CemConfig& config, Rng& rng) {
  config.validate();
  dist.validate();
  CemResult result;
  for (int it = 0; it < config.iterations; ++it) {
    const auto samples = sample_population(dist, config.population, rng, config.max_resample);
    const std::vector<double> costs = cost(std::span<const ActionSequence>(samples));
    if (costs.size() != samples.size()) throw Error("cem: cost function returned wrong number of values");

    CemIterationStats stats;
    stats.iteration = it;
    stats.best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < costs.size(); ++i) {
      if (!std::isfinite(costs[i])) {
        ++stats.non_finite;
        continue;
      }
      if (costs[i] < stats.best_cost) stats.best_cost = costs[i];
      if (costs[i] < result.best_cost) {
        result.best_cost = costs[i];
        result.best = samples[i];
      }
    }
    if (stats.non_finite > 0) {
      result.warnings.push_back("cem iteration " + std::to_string(it) + ": " + std::to_string(stats.non_finite) +
                                " non-finite costs ranked worst");
    }
    const auto elites = elite_indices(costs, config.elites);
    double elite_sum = 0.0;
    for (int i : elites) elite_sum += costs[static_cast<std::size_t>(i)];
    stats.elite_mean_cost = elite_sum / static_cast<double>(elites.size());
    stats.best_so_far = result.best_cost;
    result.iterations.push_back(stats);
    dist = update_distribution(dist, samples, costs, config);
  }
  if (result.best.size() == 0) {
    // every sample was non-finite; fall back to the distribution mean
    result.best = dist.mean;
  }
  result.distribution = std::move(dist);
  return result;
}

}  // namespace mpvic

#endif  // MPVIC_CEM_HPP_
