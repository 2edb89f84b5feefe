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

#ifndef MPVIC_CLI_HPP_
#define MPVIC_CLI_HPP_

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpvic/harness.hpp"

namespace mpvic {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3, kExitOracle = 4 };

struct CliOverrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<double> alpha_q;
  std::optional<double> alpha_r;
  std::optional<int> trials;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<std::string> dataset;
  std::optional<int> steps;
  std::optional<std::string> model;
  std::optional<std::string> controller;
  std::vector<std::string> inputs;
};

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// File values over the task preset, then command-line flags over both.
inline ExperimentConfig resolve_config(Mode mode, const CliOverrides& o) {
  const nlohmann::json root = o.config.empty() ? nlohmann::json::object() : load_json_file(o.config);
  std::optional<TaskId> task;
  if (o.task) task = parse_task(*o.task);
  ExperimentConfig c = parse_config(root, task, mode);
  if (o.seed) c.seed = *o.seed;
  if (o.alpha_q) c.weights.alpha_q = *o.alpha_q;
  if (o.alpha_r) c.weights.alpha_r = *o.alpha_r;
  if (o.trials) c.trials = *o.trials;
  if (o.out) c.out = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.dataset) c.dataset = *o.dataset;
  if (o.model) c.model = *o.model;
  if (o.controller) c.controller = *o.controller;
  if (!o.inputs.empty()) c.inputs = o.inputs;
  if (o.steps) {
    if (*o.steps < c.explore.trial_horizon) throw ConfigError("--steps must cover at least one trial");
    const int total = (*o.steps + c.explore.trial_horizon - 1) / c.explore.trial_horizon;
    if (total < c.explore.initial_trials) c.explore.initial_trials = total;
    c.explore.trials = total - c.explore.initial_trials;
  }
  c.validate();
  return c;
}

namespace detail {

inline std::string trial_name(const char* stem, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03d.csv", stem, i);
  return buf;
}

inline std::filesystem::path checkpoint_path(const ExperimentConfig& c) {
  return c.checkpoint.empty() ? std::filesystem::path(c.out) / "model.json" : std::filesystem::path(c.checkpoint);
}

inline void write_training_csv(std::ostream& os, std::span<const TrainingReport> reports) {
  os << "round,epoch,train_nll,holdout_nll\n";
  for (const auto& r : reports) {
    for (const auto& e : r.epochs) {
      os << e.round << ',' << e.epoch << ',' << format_double(e.train_nll) << ',' << format_double(e.holdout_nll)
         << '\n';
    }
  }
}

inline void record_checkpoint(RunRecorder& rec, const Ensemble& model, const ExperimentConfig& c) {
  const auto path = checkpoint_path(c);
  write_file_atomic(path, checkpoint_json(model).dump() + "\n");
  rec.add_output(path.lexically_relative(rec.dir()).string());
}

inline Ensemble load_model(const ExperimentConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("the learned model needs --checkpoint");
  if (!std::filesystem::exists(c.checkpoint)) throw ConfigError("checkpoint not found: " + c.checkpoint);
  return load_checkpoint<float>(c.checkpoint);
}

inline void write_episode_outputs(RunRecorder& rec, const std::string& prefix, std::span<const EpisodeLog> logs,
                                  bool wall_time) {
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const auto& log = logs[i];
    const int k = static_cast<int>(i);
    rec.write(prefix + trial_name("episode", k), [&](std::ostream& os) { log.write_csv(os); });
    if (!log.object.empty()) {
      rec.write(prefix + trial_name("object", k), [&](std::ostream& os) { log.write_object_csv(os); });
    }
    if (!log.impacts.empty()) {
      rec.write(prefix + trial_name("impacts", k), [&](std::ostream& os) {
        os << "t,mass,delta_vz\n";
        for (const auto& im : log.impacts) {
          os << format_double(im.time) << ',' << format_double(im.mass) << ',' << format_double(im.delta_vz) << '\n';
        }
      });
    }
    if (!log.diagnostics.empty()) {
      rec.write(prefix + trial_name("diagnostics", k),
                [&](std::ostream& os) { log.write_diagnostics_csv(os, wall_time); });
    }
  }
}

inline void write_summary(RunRecorder& rec, const std::string& prefix, const Summary& s) {
  rec.write(prefix + "summary.csv", [&](std::ostream& os) { s.write_metrics_csv(os); });
  rec.write(prefix + "summary_timeseries.csv", [&](std::ostream& os) { s.write_timesteps_csv(os); });
  rec.write(prefix + "summary_trials.csv", [&](std::ostream& os) { s.write_trials_csv(os); });
}

/// Stiffness of the normalizing baseline: the upper bound on free axes.
inline Vec3 baseline_stiffness(const MpcConfig& mpc) {
  Vec3 k = mpc.k_max;
  for (int i = 0; i < 3; ++i) {
    if (const auto& f = mpc.fixed_stiffness[static_cast<std::size_t>(i)]) k[i] = *f;
  }
  return k;
}

inline Summary run_eval_into(RunRecorder& rec, const std::string& prefix, const ExperimentConfig& c,
                             const CostWeights& weights, const Ensemble* learned) {
  std::vector<EpisodeLog> logs;
  rec.timed(prefix + "episodes", [&] {
    if (c.controller == "fixed") {
      logs = fixed_stiffness_baseline(c.env, c.plant, c.fixed_stiffness, c.trials, c.seed, weights, c.mpc.k_min,
                                      c.mpc.k_max);
    } else if (c.model == "analytic") {
      AnalyticModel model(c.plant);
      MpcConfig mpc = c.mpc;
      mpc.particles = 1;
      MpvicController<AnalyticModel> ctrl(model, mpc, weights);
      logs = run_trials(c.env, c.plant, ctrl, weights, c.trials, c.seed);
    } else {
      MpvicController<Ensemble> ctrl(*learned, c.mpc, weights);
      logs = run_trials(c.env, c.plant, ctrl, weights, c.trials, c.seed);
    }
  });
  const auto baseline = fixed_stiffness_baseline(c.env, c.plant, baseline_stiffness(c.mpc), c.trials, c.seed,
                                                 weights, c.mpc.k_min, c.mpc.k_max);
  double baseline_reward = 0.0;
  for (const auto& b : baseline) {
    for (const auto& r : b.rows) baseline_reward -= r.cost;
  }
  baseline_reward /= static_cast<double>(baseline.size());
  write_episode_outputs(rec, prefix, logs, c.wall_time);
  const Summary s = summarize(logs, c.env, c.bootstrap, c.seed, baseline_reward);
  write_summary(rec, prefix, s);
  return s;
}

inline std::vector<std::filesystem::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<std::filesystem::path> out;
  for (const auto& in : inputs) {
    const std::filesystem::path p(in);
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> found;
      for (const auto& e : std::filesystem::directory_iterator(p)) {
        const auto name = e.path().filename().string();
        if (name.rfind("episode_", 0) == 0 && e.path().extension() == ".csv") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace detail

/// Executes one resolved configuration and writes its manifest. Returns the
/// process exit status.
inline int execute(const ExperimentConfig& c, std::ostream& log = std::cout) {
  RunRecorder rec(c.out);
  int status = kExitOk;
  switch (c.mode) {
    case Mode::explore: {
      Rng rng(derive_seed(c.seed, 10));
      const auto dataset_out = std::filesystem::path(c.out) / "dataset.csv";
      ExplorationResult<float> res;
      try {
        res = rec.timed("explore", [&] {
          return explore_and_learn<float>(c.explore, c.plant, c.ensemble, c.train, rng,
                                          [&](const ExplorationRound& r, const Dataset& d) {
                                            log << "round " << r.round << ": " << r.dataset_size
                                                << " transitions, holdout NLL " << format_double(r.holdout_nll)
                                                << ", probe rho " << format_double(r.probe_rho) << '\n';
                                            d.save_csv(dataset_out);
                                          });
        });
      } catch (const TrainingError&) {
        rec.add_output("dataset.csv");
        rec.manifest(c, "training_failed").write(std::filesystem::path(c.out) / "manifest.json");
        throw;
      }
      rec.write("dataset.csv", [&](std::ostream& os) { res.dataset.write_csv(os); });
      rec.write("exploration.csv", [&](std::ostream& os) { res.report.write_csv(os); });
      rec.write("training.csv",
                [&](std::ostream& os) { detail::write_training_csv(os, res.report.training); });
      for (const auto& w : res.report.warnings) log << "warning: " << w << '\n';
      detail::record_checkpoint(rec, res.ensemble, c);
      break;
    }
    case Mode::train: {
      if (c.dataset.empty()) throw ConfigError("train needs --dataset");
      if (!std::filesystem::exists(c.dataset)) throw ConfigError("dataset not found: " + c.dataset);
      const Dataset data = Dataset::load_csv(c.dataset, c.explore.holdout_fraction);
      Rng rng(derive_seed(c.seed, 11));
      Ensemble model(c.ensemble, rng);
      const TrainingReport report = rec.timed("train", [&] { return train(model, data, c.train, rng); });
      rec.write("training.csv", [&](std::ostream& os) {
        detail::write_training_csv(os, std::span<const TrainingReport>(&report, 1));
      });
      detail::record_checkpoint(rec, model, c);
      break;
    }
    case Mode::eval: {
      std::optional<Ensemble> model;
      if (c.controller == "mpvic" && c.model == "learned") model = detail::load_model(c);
      const Summary s = detail::run_eval_into(rec, "", c, c.weights, model ? &*model : nullptr);
      log << c.trials << " trials: mean deviation " << format_double(s.mean_deviation) << " m, mean lambda "
          << format_double(s.mean_lambda) << '\n';
      break;
    }
    case Mode::sweep: {
      std::optional<Ensemble> model;
      if (c.controller == "mpvic" && c.model == "learned") model = detail::load_model(c);
      std::ostringstream table;
      table << "alpha_q,alpha_r,dir,mean_deviation,mean_lambda,mean_reward\n";
      for (const auto& p : sweep_points(c.sweep, c.weights)) {
        CostWeights w = c.weights;
        w.alpha_q = p.alpha_q;
        w.alpha_r = p.alpha_r;
        const std::string dir = "aq_" + format_double(p.alpha_q) + "_ar_" + format_double(p.alpha_r) + "/";
        const Summary s = detail::run_eval_into(rec, dir, c, w, model ? &*model : nullptr);
        table << format_double(p.alpha_q) << ',' << format_double(p.alpha_r) << ',' << dir << ','
              << format_double(s.mean_deviation) << ',' << format_double(s.mean_lambda) << ','
              << format_double(s.mean_reward) << '\n';
      }
      rec.write("sweep.csv", [&](std::ostream& os) { os << table.str(); });
      break;
    }
    case Mode::oracle_check: {
      const OracleReport report =
          rec.timed("oracle", [&] { return oracle_check(c.plant, c.mpc, c.weights, c.oracle, c.seed); });
      rec.write("oracle.csv", [&](std::ostream& os) { report.write_csv(os); });
      for (const auto& r : report.rows) {
        log << "state " << r.index << ": mpc " << format_double(r.mpc_cost) << " grid " << format_double(r.grid_cost)
            << (r.pass ? " ok" : " FAIL") << '\n';
      }
      if (!report.pass()) status = kExitOracle;
      break;
    }
    case Mode::summarize: {
      const auto paths = detail::expand_inputs(c.inputs);
      if (paths.empty()) throw ConfigError("summarize needs episode CSV inputs");
      std::vector<EpisodeLog> logs;
      for (std::size_t i = 0; i < paths.size(); ++i) {
        logs.push_back(load_episode_csv(paths[i]));
        logs.back().seed = c.seed + i;
      }
      detail::write_summary(rec, "", summarize(logs, c.env, c.bootstrap, c.seed));
      break;
    }
  }
  rec.manifest(c, status == kExitOk ? "ok" : "oracle_failed").write(std::filesystem::path(c.out) / "manifest.json");
  return status;
}

/// Command-line entry point.
inline int cli_run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Deep model predictive variable impedance control"};
  app.require_subcommand(1);
  CliOverrides o;
  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config or run manifest");
    sub->add_option("--seed", o.seed, "base seed");
    sub->add_option("--task", o.task, "compliance | falling | push");
    sub->add_option("--alpha-q", o.alpha_q, "tracking weight scale");
    sub->add_option("--alpha-r", o.alpha_r, "compliance weight scale");
    sub->add_option("--trials", o.trials, "number of episodes");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--checkpoint", o.checkpoint, "model checkpoint path");
    sub->add_option("--steps", o.steps, "exploration step budget");
    sub->add_option("--dataset", o.dataset, "dataset CSV");
    sub->add_option("--model", o.model, "learned | analytic");
    sub->add_option("--controller", o.controller, "mpvic | fixed");
  };
  const std::vector<std::pair<Mode, std::string>> modes = {
      {Mode::explore, "curiosity-driven exploration and model learning"},
      {Mode::train, "train an ensemble on a dataset CSV"},
      {Mode::eval, "run task episodes"},
      {Mode::sweep, "run episodes over a grid of cost weights"},
      {Mode::oracle_check, "compare MPC against the constant-stiffness grid search"},
      {Mode::summarize, "aggregate episode CSVs"}};
  std::vector<std::pair<Mode, CLI::App*>> subs;
  for (const auto& [m, help] : modes) {
    auto* sub = app.add_subcommand(to_string(m), help);
    add_common(sub);
    if (m == Mode::summarize) sub->add_option("inputs", o.inputs, "episode CSVs or directories");
    subs.emplace_back(m, sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  Mode mode = Mode::eval;
  for (const auto& [m, sub] : subs) {
    if (sub->parsed()) mode = m;
  }
  try {
    const ExperimentConfig c = resolve_config(mode, o);
    return execute(c, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace mpvic

#endif  // MPVIC_CLI_HPP_
