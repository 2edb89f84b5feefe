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

#include <cmath>

#include <gtest/gtest.h>

#include "mpvic/cem.hpp"

namespace mpvic {
namespace {

SequenceDistribution box(int horizon, int dim, double lo, double hi) {
  return SequenceDistribution::initial(horizon, Eigen::VectorXd::Constant(dim, lo), Eigen::VectorXd::Constant(dim, hi));
}

double quadratic(const ActionSequence& u, double optimum) { return (u.array() - optimum).square().sum(); }

TEST(SamplePopulation, ZeroVarianceReturnsMean) {
  SequenceDistribution d = box(3, 2, 0.0, 10.0);
  d.mean(1, 0) = 7.0;
  d.var.setZero();
  Rng rng(0);
  for (const auto& s : sample_population(d, 50, rng)) EXPECT_EQ(s, d.mean);
}

TEST(SamplePopulation, RespectsBounds) {
  SequenceDistribution d = box(5, 3, 0.0, 1000.0);
  d.var.setConstant(1e8);
  d.mean.setConstant(990.0);
  Rng rng(1);
  for (const auto& s : sample_population(d, 500, rng)) {
    EXPECT_GE(s.minCoeff(), 0.0);
    EXPECT_LE(s.maxCoeff(), 1000.0);
  }
}

TEST(SamplePopulation, DegenerateBoundsAndDeterminism) {
  SequenceDistribution d = box(2, 1, 4.0, 4.0);
  d.var.setConstant(3.0);
  Rng rng(2);
  for (const auto& s : sample_population(d, 20, rng)) EXPECT_TRUE((s.array() == 4.0).all());
  const SequenceDistribution w = box(4, 2, -1.0, 1.0);
  Rng a(3), b(3);
  EXPECT_EQ(sample_population(w, 30, a), sample_population(w, 30, b));
}

TEST(UpdateDistribution, Examples) {
  const SequenceDistribution d = box(1, 1, 0.0, 10.0);
  CemConfig cfg;
  cfg.elites = 3;
  cfg.population = 5;
  std::vector<ActionSequence> same(5, ActionSequence::Constant(1, 1, 6.0));
  std::vector<double> costs{1, 2, 3, 4, 5};
  cfg.learning_rate = 1.0;
  SequenceDistribution next = update_distribution(d, same, costs, cfg);
  EXPECT_EQ(next.mean(0, 0), 6.0);
  EXPECT_EQ(next.var(0, 0), 0.0);

  cfg.learning_rate = 0.0;
  next = update_distribution(d, same, costs, cfg);
  EXPECT_EQ(next.mean, d.mean);
  EXPECT_EQ(next.var, d.var);

  SequenceDistribution zero = d;
  zero.mean.setZero();
  std::vector<ActionSequence> tens(5, ActionSequence::Constant(1, 1, 10.0));
  cfg.learning_rate = 0.5;
  next = update_distribution(zero, tens, costs, cfg);
  EXPECT_DOUBLE_EQ(next.mean(0, 0), 5.0);

  EXPECT_THROW(update_distribution(d, std::span<const ActionSequence>(same).first(2),
                                   std::span<const double>(costs).first(2), cfg),
               DomainError);
}

TEST(UpdateDistribution, ElitesAreLowestCostTiesByIndex) {
  const std::vector<double> costs{3.0, 1.0, NAN, 1.0, 0.5, INFINITY};
  EXPECT_EQ(elite_indices(costs, 4), (std::vector<int>{4, 1, 3, 0}));
  EXPECT_EQ(elite_indices(costs, 6), (std::vector<int>{4, 1, 3, 0, 2, 5}));
}

TEST(Optimize, SeparableQuadraticInteriorOptimum) {
  CemConfig cfg;  // N = 200, E = 40, I = 10
  int passed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const CemResult r = optimize(per_sequence([](const ActionSequence& u) { return quadratic(u, 3.0); }),
                                 box(3, 1, 0.0, 10.0), cfg, rng);
    if (r.best_cost < 0.1 && (r.best.array() - 3.0).abs().maxCoeff() <= 0.1) ++passed;
  }
  EXPECT_GE(passed, 19);
}

TEST(Optimize, ReducesInitialBestByHundredfold) {
  CemConfig cfg;
  int passed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const CemResult r = optimize(per_sequence([](const ActionSequence& u) { return quadratic(u, 6.5); }),
                                 box(5, 2, 0.0, 10.0), cfg, rng);
    if (r.best_cost <= 0.01 * r.iterations.front().best_cost) ++passed;
  }
  EXPECT_GE(passed, 19);
}

TEST(Optimize, ConstantCost) {
  Rng rng(4);
  const CemResult r = optimize(per_sequence([](const ActionSequence&) { return 2.5; }), box(3, 2, 0, 1), CemConfig{}, rng);
  EXPECT_EQ(r.best_cost, 2.5);
}

TEST(Optimize, OptimumAtBound) {
  Rng rng(5);
  const CemResult r = optimize(per_sequence([](const ActionSequence& u) { return u.array().square().sum(); }),
                               box(3, 1, 1.0, 10.0), CemConfig{}, rng);
  EXPECT_LE((r.best.array() - 1.0).abs().maxCoeff(), 0.1);
}

TEST(Optimize, MonotoneBestBoundedAndDeterministic) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    CemConfig cfg;
    cfg.population = 60;
    cfg.elites = 10;
    cfg.iterations = 8;
    return optimize(per_sequence([](const ActionSequence& u) { return std::sin(u.sum()) + 0.01 * u.squaredNorm(); }),
                    box(4, 3, -2.0, 5.0), cfg, rng);
  };
  const CemResult a = run(6), b = run(6);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.best_cost, b.best_cost);
  for (std::size_t i = 1; i < a.iterations.size(); ++i) {
    EXPECT_LE(a.iterations[i].best_so_far, a.iterations[i - 1].best_so_far);
  }
  EXPECT_GE(a.best.minCoeff(), -2.0);
  EXPECT_LE(a.best.maxCoeff(), 5.0);
  EXPECT_GE(a.distribution.mean.minCoeff(), -2.0);
  EXPECT_LE(a.distribution.mean.maxCoeff(), 5.0);
}

TEST(Optimize, NonFiniteCostsRankWorstWithWarning) {
  Rng rng(7);
  const CemResult r = optimize(per_sequence([](const ActionSequence& u) {
                                 return u(0, 0) > 5.0 ? std::numeric_limits<double>::quiet_NaN() : quadratic(u, 2.0);
                               }),
                               box(2, 1, 0.0, 10.0), CemConfig{}, rng);
  EXPECT_TRUE(std::isfinite(r.best_cost));
  EXPECT_LE(r.best(0, 0), 5.0);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_GT(r.iterations.front().non_finite, 0);
}

TEST(SequenceDistribution, ShiftDropsFirstStep) {
  SequenceDistribution d = box(3, 1, 0.0, 10.0);
  d.mean << 1, 2, 3;
  const SequenceDistribution s = d.shifted(d.initial_var(0.25));
  EXPECT_EQ(s.mean(0, 0), 2.0);
  EXPECT_EQ(s.mean(1, 0), 3.0);
  EXPECT_EQ(s.mean(2, 0), 3.0);
  EXPECT_DOUBLE_EQ(s.var(0, 0), 2.5 * 2.5);
}

}  // namespace
}  // namespace mpvic
