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
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mpvic/cli.hpp"

namespace mpvic {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpvic_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

// Constant-stiffness log at rest on the compliance task's time grid.
EpisodeLog constant_log(double k, int steps, std::uint64_t seed = 0) {
  EpisodeLog log;
  log.seed = seed;
  for (int i = 0; i < steps; ++i) {
    EpisodeRow r;
    r.t = 0.1 * i;
    r.stiffness = Vec3::Constant(k);
    r.cost = 1.0;
    log.rows.push_back(r);
  }
  return log;
}

nlohmann::json oracle_json(const fs::path& out) {
  return {{"mode", "oracle-check"},
          {"seed", 3},
          {"paths", {{"out", out.string()}}},
          {"oracle", {{"states", 2}, {"grid", 3}}}};
}

TEST(ParseConfig, EmptyObjectUsesPreset) {
  const ExperimentConfig c = parse_config(nlohmann::json::object());
  EXPECT_EQ(c.task, TaskId::compliance);
  EXPECT_EQ(c.mode, Mode::eval);
  EXPECT_EQ(c.env.duration, task_preset(TaskId::compliance).env.duration);
  EXPECT_NO_THROW(c.validate());
  const ExperimentConfig p = parse_config({{"task", "push"}});
  EXPECT_TRUE(std::holds_alternative<PushObject>(p.env.variant));
  EXPECT_TRUE(p.mpc.fixed_stiffness[2].has_value());
}

TEST(ParseConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config({{"sed", 1}}), ConfigError);
  EXPECT_THROW(parse_config({{"mpc", {{"horizon", 10}, {"horizn", 3}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"mpc", {{"cem", {{"populaton", 3}}}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"task", "juggling"}}), ConfigError);
  EXPECT_THROW(parse_config({{"mode", "fly"}}), ConfigError);
  EXPECT_THROW(parse_config({{"trials", "three"}}), ConfigError);
  EXPECT_THROW(parse_config({{"seed", -1}}), ConfigError);
  EXPECT_THROW(parse_config(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(parse_config({{"format", "other"}, {"config", nlohmann::json::object()}}), ConfigError);
}

TEST(ParseConfig, RoundTripAndHash) {
  ExperimentConfig c = parse_config({{"task", "falling"}, {"seed", 42}, {"weights", {{"alpha_r", 0.01}}}});
  const nlohmann::json j = config_to_json(c);
  const ExperimentConfig back = parse_config(j);
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 43;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(ParseConfig, OverridesWinOverFile) {
  const ExperimentConfig c = parse_config({{"task", "falling"}, {"mode", "eval"}}, TaskId::push, Mode::sweep);
  EXPECT_EQ(c.task, TaskId::push);
  EXPECT_EQ(c.mode, Mode::sweep);
}

TEST(ParseConfig, ShippedConfigsValidate) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(MPVIC_CONFIG_DIR)) {
    if (e.path().extension() != ".json" || e.path().filename() == "schema.json") continue;
    SCOPED_TRACE(e.path().string());
    EXPECT_NO_THROW(parse_config(load_json_file(e.path().string())).validate());
    ++n;
  }
  EXPECT_GE(n, 7);
}

TEST(BootstrapCi, Properties) {
  const std::vector<double> same(10, 4.0);
  Rng rng(0);
  const MeanCi c = bootstrap_ci(same, 200, rng);
  EXPECT_EQ(c.mean, 4.0);
  EXPECT_EQ(c.lo, 4.0);
  EXPECT_EQ(c.hi, 4.0);

  const std::vector<double> x{1, 5, 2, 8, 3, 9, 4};
  Rng a(1), b(1);
  const MeanCi p = bootstrap_ci(x, 500, a), q = bootstrap_ci(x, 500, b);
  EXPECT_EQ(p.lo, q.lo);
  EXPECT_EQ(p.hi, q.hi);
  EXPECT_LE(p.lo, p.mean);
  EXPECT_GE(p.hi, p.mean);
  EXPECT_GE(p.lo, 1.0);
  EXPECT_LE(p.hi, 9.0);
  EXPECT_TRUE(std::isnan(bootstrap_ci(std::span<const double>(), 10, a).mean));
}

TEST(Summarize, SingleLogHasZeroWidthIntervals) {
  const TaskEnv env = task_preset(TaskId::compliance).env;
  const std::vector<EpisodeLog> logs{constant_log(100.0, 20)};
  const Summary s = summarize(logs, env, 100, 0);
  ASSERT_EQ(s.timesteps.size(), 20u);
  for (const auto& t : s.timesteps) {
    EXPECT_EQ(t.trials, 1);
    EXPECT_EQ(t.lambda.lo, t.lambda.hi);
    EXPECT_EQ(t.deviation.lo, t.deviation.hi);
  }
  EXPECT_EQ(s.mean_reward, -20.0);
}

TEST(Summarize, AveragesStiffnessAcrossTrials) {
  const TaskEnv env = task_preset(TaskId::compliance).env;
  const std::vector<EpisodeLog> logs{constant_log(100.0, 10, 0), constant_log(200.0, 10, 1)};
  const Summary s = summarize(logs, env, 100, 0, -40.0);
  EXPECT_DOUBLE_EQ(s.mean_lambda, 150.0);
  for (const auto& t : s.timesteps) EXPECT_DOUBLE_EQ(t.lambda.mean, 150.0);
  ASSERT_TRUE(s.normalized_reward.has_value());
  EXPECT_DOUBLE_EQ(*s.normalized_reward, -0.25);
  ASSERT_EQ(s.trials.size(), 2u);
  EXPECT_EQ(s.trials[1].seed, 1u);
  std::ostringstream os;
  s.write_trials_csv(os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), Summary::kTrialHeader);
}

TEST(Summarize, RejectsEmptyAndMismatchedGrids) {
  const TaskEnv env = task_preset(TaskId::compliance).env;
  EXPECT_THROW(summarize(std::span<const EpisodeLog>(), env), DomainError);
  EpisodeLog shifted = constant_log(100.0, 5);
  for (auto& r : shifted.rows) r.t += 0.05;
  const std::vector<EpisodeLog> logs{constant_log(100.0, 5), shifted};
  EXPECT_THROW(summarize(logs, env), DomainError);
}

TEST(PushPhases, StiffThenCompliant) {
  PushObject push;
  EpisodeLog log;
  for (int i = 0; i < 40; ++i) {
    EpisodeRow r;
    r.t = 0.1 * i;
    const double d = r.t < 1.0 ? 0.14 : std::max(0.0, 0.14 - 0.05 * (r.t - 1.0));
    r.stiffness = Vec3(r.t < 2.0 ? 800.0 : 50.0, r.t < 2.0 ? 600.0 : 30.0, 1000.0);
    log.rows.push_back(r);
    log.object.push_back(ObjectRow{r.t, Vec3::Zero(), 0.0, d});
  }
  const PushPhases p = push_phases(log, push);
  ASSERT_TRUE(p.reach_time.has_value());
  EXPECT_NEAR(*p.reach_time, 3.4, 1e-9);
  EXPECT_DOUBLE_EQ(p.early_stiffness, 700.0);
  EXPECT_DOUBLE_EQ(p.late_stiffness, 40.0);
  EXPECT_TRUE(p.stiff_then_compliant());
  log.object.pop_back();
  EXPECT_FALSE(push_phases(log, push).reach_time.has_value());
}

TEST(ImpactResponses, WindowMeans) {
  EpisodeLog log = constant_log(100.0, 20);
  for (int i = 10; i < 20; ++i) log.rows[static_cast<std::size_t>(i)].stiffness.z() = 300.0;
  log.impacts.push_back(ImpactEvent{1.0, 1.0, -1.0});
  const auto r = impact_responses(log, 0.5);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_DOUBLE_EQ(r[0].before, 100.0);
  EXPECT_DOUBLE_EQ(r[0].after, 300.0);
}

TEST(SweepPoints, CrossProductInOrder) {
  SweepConfig s;
  s.alpha_q = {1.0, 2.0};
  s.alpha_r = {0.01, 0.1, 1.0};
  const auto pts = sweep_points(s, CostWeights{});
  ASSERT_EQ(pts.size(), 6u);
  EXPECT_EQ(pts[0].alpha_q, 1.0);
  EXPECT_EQ(pts[0].alpha_r, 0.01);
  EXPECT_EQ(pts[2].alpha_r, 1.0);
  EXPECT_EQ(pts[3].alpha_q, 2.0);
  CostWeights base;
  base.alpha_q = 7.0;
  base.alpha_r = 0.5;
  const auto one = sweep_points(SweepConfig{}, base);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].alpha_q, 7.0);
  EXPECT_EQ(one[0].alpha_r, 0.5);
}

TEST(EpisodeCsv, RoundTripAndBadHeader) {
  const TaskEnv env = task_preset(TaskId::compliance).env;
  PlantConfig plant;
  plant.max_substep = 1e-3;
  const auto logs = fixed_stiffness_baseline(env, plant, Vec3(300, 200, 100), 1, 5, CostWeights{});
  std::ostringstream os;
  logs[0].write_csv(os);
  std::istringstream is(os.str());
  const EpisodeLog back = read_episode_csv(is);
  ASSERT_EQ(back.rows.size(), logs[0].rows.size());
  for (std::size_t k = 0; k < back.rows.size(); ++k) {
    EXPECT_EQ(back.rows[k].t, logs[0].rows[k].t);
    EXPECT_EQ(back.rows[k].state, logs[0].rows[k].state);
    EXPECT_EQ(back.rows[k].stiffness, logs[0].rows[k].stiffness);
    EXPECT_EQ(back.rows[k].force, logs[0].rows[k].force);
    EXPECT_EQ(back.rows[k].cost, logs[0].rows[k].cost);
  }
  std::istringstream bad("t,x\n0,1\n");
  EXPECT_THROW(read_episode_csv(bad), DomainError);
  std::istringstream short_row(std::string(EpisodeLog::kCsvHeader) + "\n0,1,2\n");
  EXPECT_THROW(read_episode_csv(short_row), DomainError);
}

TEST(FixedBaseline, ConstantStiffnessSeedsAndBounds) {
  const TaskEnv env = task_preset(TaskId::falling).env;
  PlantConfig plant;
  plant.max_substep = 1e-3;
  const Vec3 k(400, 500, 600);
  const auto a = fixed_stiffness_baseline(env, plant, k, 2, 10, CostWeights{});
  const auto b = fixed_stiffness_baseline(env, plant, k, 2, 10, CostWeights{});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].seed, 10u);
  EXPECT_EQ(a[1].seed, 11u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].rows.size(), b[i].rows.size());
    for (std::size_t r = 0; r < a[i].rows.size(); ++r) {
      EXPECT_EQ(a[i].rows[r].stiffness, k);
      EXPECT_EQ(a[i].rows[r].state, b[i].rows[r].state);
    }
  }
  EXPECT_THROW(fixed_stiffness_baseline(env, plant, Vec3(0.01, 1, 1), 1, 0, CostWeights{}), DomainError);
  EXPECT_THROW(fixed_stiffness_baseline(env, plant, Vec3(1, 1, 2000), 1, 0, CostWeights{}), DomainError);
}

TEST(Manifest, RerunFromManifestIsByteIdentical) {
  const fs::path dir = scratch_dir("manifest");
  const ExperimentConfig c = parse_config(oracle_json(dir / "a"));
  std::ostringstream log;
  ASSERT_EQ(execute(c, log), kExitOk) << log.str();
  const nlohmann::json manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  EXPECT_EQ(manifest.at("format"), kManifestFormat);
  EXPECT_EQ(manifest.at("status"), "ok");
  EXPECT_EQ(manifest.at("config"), config_to_json(c));

  ExperimentConfig again = parse_config(manifest);
  EXPECT_EQ(config_hash(again), config_hash(c));
  again.out = (dir / "b").string();
  ASSERT_EQ(execute(again, log), kExitOk);
  EXPECT_EQ(slurp(dir / "a" / "oracle.csv"), slurp(dir / "b" / "oracle.csv"));
  fs::remove_all(dir);
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "mpvic");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str() + err.str();
  return code;
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  std::string text;
  EXPECT_EQ(run_cli({"--help"}, &text), kExitOk);
  EXPECT_NE(text.find("oracle-check"), std::string::npos);
  EXPECT_EQ(run_cli({}), kExitConfig);
  EXPECT_EQ(run_cli({"fly"}), kExitConfig);
  EXPECT_EQ(run_cli({"eval", "--config", (dir / "missing.json").string()}), kExitConfig);

  write_text(dir / "bad.json", R"({"trials": 2, "unknown": true})");
  EXPECT_EQ(run_cli({"eval", "--config", (dir / "bad.json").string()}), kExitConfig);
  write_text(dir / "broken.json", "{\"trials\": ");
  EXPECT_EQ(run_cli({"eval", "--config", (dir / "broken.json").string()}), kExitConfig);

  EXPECT_EQ(run_cli({"eval", "--out", (dir / "e").string()}), kExitConfig);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", (dir / "none.json").string(), "--out", (dir / "e").string()}),
            kExitConfig);
  EXPECT_EQ(run_cli({"summarize", "--out", (dir / "s").string()}), kExitConfig);

  write_text(dir / "oracle.json", oracle_json(dir / "o").dump());
  EXPECT_EQ(run_cli({"oracle-check", "--config", (dir / "oracle.json").string()}, &text), kExitOk) << text;
  EXPECT_TRUE(fs::exists(dir / "o" / "oracle.csv"));
  fs::remove_all(dir);
}

TEST(Cli, FixedEvalThenSummarize) {
  const fs::path dir = scratch_dir("summarize");
  write_text(dir / "eval.json",
             nlohmann::json{{"env", {{"duration", 1.0}}}, {"controller", {{"type", "fixed"}}}}.dump());
  std::string text;
  ASSERT_EQ(run_cli({"eval", "--config", (dir / "eval.json").string(), "--trials", "2", "--out",
                     (dir / "e").string()},
                    &text),
            kExitOk)
      << text;
  ASSERT_TRUE(fs::exists(dir / "e" / "episode_000.csv"));
  ASSERT_TRUE(fs::exists(dir / "e" / "episode_001.csv"));
  ASSERT_EQ(run_cli({"summarize", (dir / "e" / "episode_000.csv").string(), (dir / "e" / "episode_001.csv").string(),
                     "--out", (dir / "s").string()},
                    &text),
            kExitOk)
      << text;
  EXPECT_TRUE(fs::exists(dir / "s" / "manifest.json"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace mpvic
