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

#ifndef MPVIC_HARNESS_HPP_
#define MPVIC_HARNESS_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpvic/cem.hpp"
#include "mpvic/common.hpp"
#include "mpvic/controller.hpp"
#include "mpvic/explorer.hpp"
#include "mpvic/impedance_dynamics.hpp"
#include "mpvic/penn.hpp"

namespace mpvic {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kManifestFormat = "mpvic.manifest";

enum class Mode { explore, train, eval, sweep, oracle_check, summarize };
enum class TaskId { compliance, falling, push };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::explore: return "explore";
    case Mode::train: return "train";
    case Mode::eval: return "eval";
    case Mode::sweep: return "sweep";
    case Mode::oracle_check: return "oracle-check";
    case Mode::summarize: return "summarize";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::explore, Mode::train, Mode::eval, Mode::sweep, Mode::oracle_check, Mode::summarize}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown mode '" + s + "' (explore|train|eval|sweep|oracle-check|summarize)");
}

inline std::string to_string(TaskId t) {
  switch (t) {
    case TaskId::compliance: return "compliance";
    case TaskId::falling: return "falling";
    case TaskId::push: return "push";
  }
  return "?";
}

inline TaskId parse_task(const std::string& s) {
  for (TaskId t : {TaskId::compliance, TaskId::falling, TaskId::push}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown task '" + s + "' (compliance|falling|push)");
}

// ---------------------------------------------------------------------------
// Task presets

struct TaskPreset {
  TaskEnv env;
  CostWeights weights;
  std::array<std::optional<double>, 3> fixed_stiffness{};
};

/// Defaults for the three simulated tasks.
inline TaskPreset task_preset(TaskId id) {
  TaskPreset p;
  p.env.name = to_string(id);
  switch (id) {
    case TaskId::compliance:
      p.env.duration = 8.0;
      p.env.variant = ComplianceHold{};
      p.weights.alpha_r = 0.1;
      break;
    case TaskId::falling:
      p.env.duration = 10.0;
      p.env.variant = FallingObject{};
      p.weights.alpha_r = 0.1;
      break;
    case TaskId::push: {
      p.env.duration = 5.0;
      p.env.start = Vec3(-0.05, -0.05, 0.0);
      PushObject push;
      p.env.variant = push;
      p.weights.alpha_q = 3.5;
      p.weights.alpha_r = 0.1;
      p.fixed_stiffness[2] = push.fixed_z_stiffness;
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct OracleConfig {
  int states = 10;
  int grid = 11;             // points per axis
  double tolerance = 0.05;   // one-sided relative
  double position_range = 0.1;
  double velocity_range = 0.2;
  double force_range = 20.0;
};

struct SweepConfig {
  std::vector<double> alpha_q;
  std::vector<double> alpha_r;
};

struct ExperimentConfig {
  Mode mode = Mode::eval;
  TaskId task = TaskId::compliance;
  std::uint64_t seed = 0;
  int trials = 1;
  std::string out = "out";
  std::string dataset;     // input dataset CSV (train)
  std::string checkpoint;  // model checkpoint (eval/sweep input, explore/train output)
  std::vector<std::string> inputs;  // episode CSVs (summarize)

  std::string controller = "mpvic";  // mpvic | fixed
  std::string model = "learned";     // learned | analytic
  Vec3 fixed_stiffness = Vec3::Constant(1000.0);

  PlantConfig plant;
  EnsembleConfig ensemble;
  TrainConfig train;
  ExplorationConfig explore;
  MpcConfig mpc;
  CostWeights weights;
  TaskEnv env;
  SweepConfig sweep;
  OracleConfig oracle;
  int bootstrap = 1000;
  bool wall_time = false;  // adds a wall-time column to diagnostics CSVs

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (controller != "mpvic" && controller != "fixed") throw ConfigError("controller must be 'mpvic' or 'fixed'");
    if (model != "learned" && model != "analytic") throw ConfigError("model must be 'learned' or 'analytic'");
    if (!fixed_stiffness.allFinite() || (fixed_stiffness.array() < mpc.k_min.array()).any() ||
        (fixed_stiffness.array() > mpc.k_max.array()).any()) {
      throw ConfigError("fixed_stiffness must lie within the stiffness bounds");
    }
    plant.validate();
    ensemble.validate();
    train.validate();
    explore.validate();
    mpc.validate();
    weights.validate();
    env.validate(plant);
    if (oracle.states < 1 || oracle.grid < 2 || !(oracle.tolerance >= 0.0)) {
      throw ConfigError("oracle: states >= 1, grid >= 2, tolerance >= 0 required");
    }
    if (bootstrap < 1) throw ConfigError("bootstrap must be at least 1");
    for (double v : sweep.alpha_q) {
      if (!(v >= 0.0)) throw ConfigError("sweep.alpha_q values must be >= 0");
    }
    for (double v : sweep.alpha_r) {
      if (!(v >= 0.0)) throw ConfigError("sweep.alpha_r values must be >= 0");
    }
  }
};

namespace detail {

/// Reads known keys from a JSON object and rejects everything else.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, path_ + "." + key);
  }

  std::optional<JsonReader> child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return JsonReader(*it, path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(path_ + ": unknown key '" + k + "'");
    }
  }

 private:
  template <class T>
  static T convert(const nlohmann::json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      return v.get<int>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
      std::vector<double> out;
      for (const auto& e : v) out.push_back(convert<double>(e, where));
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array of integers");
      std::vector<int> out;
      for (const auto& e : v) out.push_back(convert<int>(e, where));
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array of strings");
      std::vector<std::string> out;
      for (const auto& e : v) out.push_back(convert<std::string>(e, where));
      return out;
    } else if constexpr (std::is_same_v<T, Vec3> || std::is_same_v<T, Vec6>) {
      constexpr int n = T::RowsAtCompileTime;
      if (!v.is_array() || v.size() != n) {
        throw ConfigError(where + ": expected an array of " + std::to_string(n) + " numbers");
      }
      T out;
      for (int i = 0; i < n; ++i) out[i] = convert<double>(v[static_cast<std::size_t>(i)], where);
      return out;
    } else if constexpr (std::is_same_v<T, std::array<std::optional<double>, 3>>) {
      if (!v.is_array() || v.size() != 3) throw ConfigError(where + ": expected an array of 3 numbers or nulls");
      T out{};
      for (std::size_t i = 0; i < 3; ++i) {
        if (!v[i].is_null()) out[i] = convert<double>(v[i], where);
      }
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline nlohmann::json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline void read_cem(JsonReader r, CemConfig& c) {
  r.read("population", c.population);
  r.read("elites", c.elites);
  r.read("learning_rate", c.learning_rate);
  r.read("iterations", c.iterations);
  r.read("initial_std_fraction", c.initial_std_fraction);
  r.read("max_resample", c.max_resample);
  r.finish();
}

inline nlohmann::json cem_json(const CemConfig& c) {
  return {{"population", c.population},
          {"elites", c.elites},
          {"learning_rate", c.learning_rate},
          {"iterations", c.iterations},
          {"initial_std_fraction", c.initial_std_fraction},
          {"max_resample", c.max_resample}};
}

inline void read_task_params(JsonReader r, TaskEnv& env) {
  std::visit(
      [&r](auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, ComplianceHold>) {
          r.read("amplitude", v.amplitude);
          r.read("noise_halfwidth", v.noise_halfwidth);
          r.read("period", v.period);
          r.read("axis", v.axis);
        } else if constexpr (std::is_same_v<T, FallingObject>) {
          r.read("first_drop", v.first_drop);
          r.read("drop_interval", v.drop_interval);
          r.read("drop_count", v.drop_count);
          r.read("masses", v.masses);
          r.read("mass_min", v.mass_min);
          r.read("mass_max", v.mass_max);
          r.read("height_min", v.height_min);
          r.read("height_max", v.height_max);
          r.read("gravity", v.gravity);
        } else {
          r.read("command_time", v.command_time);
          r.read("push_delta", v.push_delta);
          r.read("mass_min", v.mass_min);
          r.read("mass_max", v.mass_max);
          r.read("static_friction", v.static_friction);
          r.read("kinetic_friction", v.kinetic_friction);
          r.read("gravity", v.gravity);
          r.read("contact_stiffness", v.contact_stiffness);
          r.read("fixed_z_stiffness", v.fixed_z_stiffness);
        }
      },
      env.variant);
  r.finish();
}

inline nlohmann::json task_params_json(const TaskEnv& env) {
  return std::visit(
      [](const auto& v) -> nlohmann::json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, ComplianceHold>) {
          return {{"amplitude", v.amplitude}, {"noise_halfwidth", v.noise_halfwidth}, {"period", v.period},
                  {"axis", v.axis}};
        } else if constexpr (std::is_same_v<T, FallingObject>) {
          return {{"first_drop", v.first_drop}, {"drop_interval", v.drop_interval}, {"drop_count", v.drop_count},
                  {"masses", v.masses},         {"mass_min", v.mass_min},           {"mass_max", v.mass_max},
                  {"height_min", v.height_min}, {"height_max", v.height_max},       {"gravity", v.gravity}};
        } else {
          return {{"command_time", v.command_time},
                  {"push_delta", vec_json(v.push_delta)},
                  {"mass_min", v.mass_min},
                  {"mass_max", v.mass_max},
                  {"static_friction", v.static_friction},
                  {"kinetic_friction", v.kinetic_friction},
                  {"gravity", v.gravity},
                  {"contact_stiffness", v.contact_stiffness},
                  {"fixed_z_stiffness", v.fixed_z_stiffness}};
        }
      },
      env.variant);
}

inline nlohmann::json optional_axes_json(const std::array<std::optional<double>, 3>& a) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& v : a) out.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return out;
}

}  // namespace detail

/// Task and mode are resolved first (`task_override` wins over the file) so
/// the task preset can be laid down before the file's values.
inline ExperimentConfig parse_config(const nlohmann::json& root, std::optional<TaskId> task_override = std::nullopt,
                                     std::optional<Mode> mode_override = std::nullopt) {
  const nlohmann::json* j = &root;
  if (root.is_object() && root.contains("format")) {
    if (root.at("format") != kManifestFormat) throw ConfigError("unsupported document format");
    if (!root.contains("config")) throw ConfigError("manifest has no config");
    j = &root.at("config");
  }
  detail::JsonReader r(*j, "config");
  ExperimentConfig c;
  std::string mode = to_string(c.mode), task = to_string(c.task);
  r.read("mode", mode);
  r.read("task", task);
  c.mode = mode_override ? *mode_override : parse_mode(mode);
  c.task = task_override ? *task_override : parse_task(task);
  TaskPreset preset = task_preset(c.task);
  c.env = preset.env;
  c.weights = preset.weights;
  c.mpc.fixed_stiffness = preset.fixed_stiffness;

  r.read("seed", c.seed);
  r.read("trials", c.trials);
  r.read("bootstrap", c.bootstrap);
  r.read("wall_time", c.wall_time);
  if (auto p = r.child("paths")) {
    p->read("out", c.out);
    p->read("dataset", c.dataset);
    p->read("checkpoint", c.checkpoint);
    p->read("inputs", c.inputs);
    p->finish();
  }
  if (auto p = r.child("controller")) {
    p->read("type", c.controller);
    p->read("model", c.model);
    p->read("fixed_stiffness", c.fixed_stiffness);
    p->finish();
  }
  if (auto p = r.child("plant")) {
    p->read("mass", c.plant.mass);
    p->read("workspace_radius", c.plant.workspace_radius);
    p->read("dt", c.plant.dt);
    p->read("max_substep", c.plant.max_substep);
    p->read("control_period", c.plant.control_period);
    p->finish();
  }
  if (auto p = r.child("ensemble")) {
    p->read("members", c.ensemble.members);
    p->read("hidden", c.ensemble.hidden);
    p->read("logvar_min", c.ensemble.logvar_min);
    p->read("logvar_max", c.ensemble.logvar_max);
    p->finish();
  }
  if (auto p = r.child("train")) {
    p->read("epochs", c.train.epochs);
    p->read("batch_size", c.train.batch_size);
    p->read("learning_rate", c.train.learning_rate);
    p->finish();
  }
  if (auto p = r.child("explore")) {
    p->read("initial_trials", c.explore.initial_trials);
    p->read("trials", c.explore.trials);
    p->read("trial_horizon", c.explore.trial_horizon);
    p->read("force_range", c.explore.force_range);
    p->read("target_range", c.explore.target_range);
    p->read("k_min", c.explore.k_min);
    p->read("k_max", c.explore.k_max);
    p->read("plan_horizon", c.explore.plan_horizon);
    p->read("probes", c.explore.probes);
    p->read("probe_velocity_range", c.explore.probe_velocity_range);
    p->read("holdout_fraction", c.explore.holdout_fraction);
    if (auto q = p->child("cem")) detail::read_cem(*q, c.explore.cem);
    p->finish();
  }
  if (auto p = r.child("mpc")) {
    p->read("horizon", c.mpc.horizon);
    p->read("particles", c.mpc.particles);
    p->read("k_min", c.mpc.k_min);
    p->read("k_max", c.mpc.k_max);
    p->read("fixed_stiffness", c.mpc.fixed_stiffness);
    if (auto q = p->child("cem")) detail::read_cem(*q, c.mpc.cem);
    p->finish();
  }
  if (auto p = r.child("weights")) {
    p->read("q_base", c.weights.q_base);
    p->read("r_base", c.weights.r_base);
    p->read("alpha_q", c.weights.alpha_q);
    p->read("alpha_r", c.weights.alpha_r);
    p->read("schedule_q", c.weights.schedule_q);
    p->finish();
  }
  if (auto p = r.child("env")) {
    p->read("start", c.env.start);
    p->read("duration", c.env.duration);
    p->read("force_noise_std", c.env.force_noise_std);
    if (auto q = p->child("params")) detail::read_task_params(*q, c.env);
    p->finish();
  }
  if (auto p = r.child("sweep")) {
    p->read("alpha_q", c.sweep.alpha_q);
    p->read("alpha_r", c.sweep.alpha_r);
    p->finish();
  }
  if (auto p = r.child("oracle")) {
    p->read("states", c.oracle.states);
    p->read("grid", c.oracle.grid);
    p->read("tolerance", c.oracle.tolerance);
    p->read("position_range", c.oracle.position_range);
    p->read("velocity_range", c.oracle.velocity_range);
    p->read("force_range", c.oracle.force_range);
    p->finish();
  }
  r.finish();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using detail::vec_json;
  nlohmann::json j;
  j["mode"] = to_string(c.mode);
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["trials"] = c.trials;
  j["bootstrap"] = c.bootstrap;
  j["wall_time"] = c.wall_time;
  j["paths"] = {{"out", c.out}, {"dataset", c.dataset}, {"checkpoint", c.checkpoint}, {"inputs", c.inputs}};
  j["controller"] = {{"type", c.controller}, {"model", c.model}, {"fixed_stiffness", vec_json(c.fixed_stiffness)}};
  j["plant"] = {{"mass", vec_json(c.plant.mass)},
                {"workspace_radius", c.plant.workspace_radius},
                {"dt", c.plant.dt},
                {"max_substep", c.plant.max_substep},
                {"control_period", c.plant.control_period}};
  j["ensemble"] = {{"members", c.ensemble.members},
                   {"hidden", c.ensemble.hidden},
                   {"logvar_min", c.ensemble.logvar_min},
                   {"logvar_max", c.ensemble.logvar_max}};
  j["train"] = {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate}};
  j["explore"] = {{"initial_trials", c.explore.initial_trials},
                  {"trials", c.explore.trials},
                  {"trial_horizon", c.explore.trial_horizon},
                  {"force_range", c.explore.force_range},
                  {"target_range", c.explore.target_range},
                  {"k_min", vec_json(c.explore.k_min)},
                  {"k_max", vec_json(c.explore.k_max)},
                  {"plan_horizon", c.explore.plan_horizon},
                  {"probes", c.explore.probes},
                  {"probe_velocity_range", c.explore.probe_velocity_range},
                  {"holdout_fraction", c.explore.holdout_fraction},
                  {"cem", detail::cem_json(c.explore.cem)}};
  j["mpc"] = {{"horizon", c.mpc.horizon},
              {"particles", c.mpc.particles},
              {"k_min", vec_json(c.mpc.k_min)},
              {"k_max", vec_json(c.mpc.k_max)},
              {"fixed_stiffness", detail::optional_axes_json(c.mpc.fixed_stiffness)},
              {"cem", detail::cem_json(c.mpc.cem)}};
  j["weights"] = {{"q_base", vec_json(c.weights.q_base)},
                  {"r_base", vec_json(c.weights.r_base)},
                  {"alpha_q", c.weights.alpha_q},
                  {"alpha_r", c.weights.alpha_r},
                  {"schedule_q", c.weights.schedule_q}};
  j["env"] = {{"start", vec_json(c.env.start)},
              {"duration", c.env.duration},
              {"force_noise_std", c.env.force_noise_std},
              {"params", detail::task_params_json(c.env)}};
  j["sweep"] = {{"alpha_q", c.sweep.alpha_q}, {"alpha_r", c.sweep.alpha_r}};
  j["oracle"] = {{"states", c.oracle.states},
                 {"grid", c.oracle.grid},
                 {"tolerance", c.oracle.tolerance},
                 {"position_range", c.oracle.position_range},
                 {"velocity_range", c.oracle.velocity_range},
                 {"force_range", c.oracle.force_range}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(config_to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Run manifest

inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << contents;
    if (!os) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RunManifest {
  ExperimentConfig config;
  std::vector<std::string> outputs;  // relative to the output directory
  std::vector<std::pair<std::string, double>> wall_times;  // phase, seconds
  std::string status = "ok";

  nlohmann::json to_json() const {
    nlohmann::json times = nlohmann::json::object();
    for (const auto& [k, v] : wall_times) times[k] = v;
    char hash[17];
    std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash(config)));
    return {{"format", kManifestFormat},
            {"version", 1},
            {"mpvic_version", kVersion},
            {"checkpoint_format", {{"name", kCheckpointFormat}, {"version", kCheckpointVersion}}},
            {"config_hash", hash},
            {"seed", config.seed},
            {"status", status},
            {"config", config_to_json(config)},
            {"outputs", outputs},
            {"wall_times", times}};
  }

  void write(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }
};

/// Collects outputs and phase timings of one run.
class RunRecorder {
 public:
  explicit RunRecorder(std::filesystem::path out_dir) : out_(std::move(out_dir)) {
    std::filesystem::create_directories(out_);
  }

  const std::filesystem::path& dir() const { return out_; }

  template <class Writer>
  void write(const std::string& relative, Writer&& writer) {
    std::ostringstream os;
    writer(os);
    write_file_atomic(out_ / relative, os.str());
    outputs_.push_back(relative);
  }

  void add_output(const std::string& relative) { outputs_.push_back(relative); }

  template <class F>
  auto timed(const std::string& phase, F&& f) {
    const auto start = std::chrono::steady_clock::now();
    auto stop = [&] {
      times_.emplace_back(phase, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    };
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      stop();
    } else {
      auto r = f();
      stop();
      return r;
    }
  }

  RunManifest manifest(const ExperimentConfig& config, std::string status = "ok") const {
    return {config, outputs_, times_, std::move(status)};
  }

 private:
  std::filesystem::path out_;
  std::vector<std::string> outputs_;
  std::vector<std::pair<std::string, double>> times_;
};

// ---------------------------------------------------------------------------
// Episode CSV input

inline EpisodeLog read_episode_csv(std::istream& is, const std::string& name = "episode") {
  std::string line;
  if (!std::getline(is, line)) throw DomainError(name + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != EpisodeLog::kCsvHeader) throw DomainError(name + ": unexpected header '" + line + "'");
  EpisodeLog log;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 14) throw DomainError(name + ":" + std::to_string(lineno) + ": expected 14 fields");
    double v[14];
    for (int i = 0; i < 14; ++i) v[i] = parse_double(fields[static_cast<std::size_t>(i)]);
    EpisodeRow r;
    r.t = v[0];
    r.state.pos = Vec3(v[1], v[2], v[3]);
    r.state.vel = Vec3(v[4], v[5], v[6]);
    r.stiffness = Vec3(v[7], v[8], v[9]);
    r.force = Vec3(v[10], v[11], v[12]);
    r.cost = v[13];
    log.rows.push_back(r);
  }
  return log;
}

inline EpisodeLog load_episode_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  return read_episode_csv(is, path.string());
}

// ---------------------------------------------------------------------------
// Summaries

struct MeanCi {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Mean with a percentile bootstrap interval over the given samples.
inline MeanCi bootstrap_ci(std::span<const double> x, int resamples, Rng& rng, double level = 0.95) {
  MeanCi out;
  if (x.empty()) return {std::nan(""), std::nan(""), std::nan("")};
  double s = 0.0;
  for (double v : x) s += v;
  out.mean = s / static_cast<double>(x.size());
  std::vector<double> means(static_cast<std::size_t>(resamples));
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (auto& m : means) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[pick(rng)];
    m = acc / static_cast<double>(x.size());
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const auto j = std::min(i + 1, means.size() - 1);
    return means[i] + (pos - static_cast<double>(i)) * (means[j] - means[i]);
  };
  out.lo = std::min(quantile((1.0 - level) / 2.0), out.mean);
  out.hi = std::max(quantile(1.0 - (1.0 - level) / 2.0), out.mean);
  return out;
}

inline double mean_stiffness_eigenvalue(const Vec3& k) { return stiffness_eigenvalues(k).mean(); }

struct TrialSummary {
  std::uint64_t seed = 0;
  int steps = 0;
  double mean_deviation = 0.0;  // mean |x - x_r|
  double mean_lambda = 0.0;     // mean over time of the mean eigenvalue
  double reward = 0.0;          // negated summed cost
  bool terminated = false;
};

struct TimestepSummary {
  double t = 0.0;
  int trials = 0;
  MeanCi deviation;
  MeanCi lambda;
  Vec3 stiffness = Vec3::Zero();  // per-axis mean
  Vec3 force = Vec3::Zero();
};

struct Summary {
  std::vector<TimestepSummary> timesteps;
  std::vector<TrialSummary> trials;
  double mean_deviation = 0.0;
  double mean_lambda = 0.0;
  double mean_reward = 0.0;
  std::optional<double> normalized_reward;  // reward / |baseline reward|
  std::vector<std::pair<std::string, double>> phases;  // per-phase stiffness statistics

  static constexpr const char* kTimestepHeader =
      "t,trials,deviation_mean,deviation_lo,deviation_hi,lambda_mean,lambda_lo,lambda_hi,Kx,Ky,Kz,fx,fy,fz";
  static constexpr const char* kTrialHeader = "seed,steps,mean_deviation,mean_lambda,reward,terminated";

  void write_timesteps_csv(std::ostream& os) const {
    os << kTimestepHeader << '\n';
    for (const auto& s : timesteps) {
      os << format_double(s.t) << ',' << s.trials;
      for (double v : {s.deviation.mean, s.deviation.lo, s.deviation.hi, s.lambda.mean, s.lambda.lo, s.lambda.hi,
                       s.stiffness.x(), s.stiffness.y(), s.stiffness.z(), s.force.x(), s.force.y(), s.force.z()}) {
        os << ',' << format_double(v);
      }
      os << '\n';
    }
  }

  void write_trials_csv(std::ostream& os) const {
    os << kTrialHeader << '\n';
    for (const auto& t : trials) {
      os << t.seed << ',' << t.steps << ',' << format_double(t.mean_deviation) << ',' << format_double(t.mean_lambda)
         << ',' << format_double(t.reward) << ',' << (t.terminated ? 1 : 0) << '\n';
    }
  }

  void write_metrics_csv(std::ostream& os) const {
    os << "metric,value\n";
    os << "mean_deviation," << format_double(mean_deviation) << '\n';
    os << "mean_lambda," << format_double(mean_lambda) << '\n';
    os << "mean_reward," << format_double(mean_reward) << '\n';
    if (normalized_reward) os << "normalized_reward," << format_double(*normalized_reward) << '\n';
    for (const auto& [k, v] : phases) os << k << ',' << format_double(v) << '\n';
  }
};

// Push-task phase statistics on the push axes (x, y).
struct PushPhases {
  std::optional<double> reach_time;  // first time within `reach_radius` of the goal
  double early_stiffness = 0.0;      // first quarter of [command, reach]
  double late_stiffness = 0.0;       // final quarter of [reach, end]
  double final_distance = 0.0;
  bool stiff_then_compliant() const { return reach_time && early_stiffness > late_stiffness; }
};

inline PushPhases push_phases(const EpisodeLog& log, const PushObject& push, double reach_radius = 0.02) {
  PushPhases out;
  if (log.rows.empty() || log.object.size() != log.rows.size()) return out;
  const std::size_t n = log.rows.size();
  std::size_t k0 = n, kr = n;
  for (std::size_t k = 0; k < n; ++k) {
    if (k0 == n && log.rows[k].t + 1e-9 >= push.command_time) k0 = k;
    if (k0 != n && kr == n && log.object[k].target_distance <= reach_radius) kr = k;
  }
  out.final_distance = log.object.back().target_distance;
  if (kr == n) return out;
  out.reach_time = log.rows[kr].t;
  auto push_k = [&](std::size_t k) { return 0.5 * (log.rows[k].stiffness.x() + log.rows[k].stiffness.y()); };
  const std::size_t q1 = std::max<std::size_t>(1, (kr - k0 + 1) / 4);
  for (std::size_t k = k0; k < k0 + q1; ++k) out.early_stiffness += push_k(k);
  out.early_stiffness /= static_cast<double>(q1);
  const std::size_t q2 = std::max<std::size_t>(1, (n - kr) / 4);
  for (std::size_t k = n - q2; k < n; ++k) out.late_stiffness += push_k(k);
  out.late_stiffness /= static_cast<double>(q2);
  return out;
}

struct ImpactResponse {
  double time = 0.0;
  double before = 0.0;  // mean K_z over [t - window, t)
  double after = 0.0;   // mean K_z over [t, t + window)
};

inline std::vector<ImpactResponse> impact_responses(const EpisodeLog& log, double window = 0.5) {
  std::vector<ImpactResponse> out;
  for (const auto& im : log.impacts) {
    ImpactResponse r;
    r.time = im.time;
    int nb = 0, na = 0;
    for (const auto& row : log.rows) {
      if (row.t >= im.time - window - 1e-9 && row.t < im.time - 1e-9) {
        r.before += row.stiffness.z();
        ++nb;
      } else if (row.t >= im.time - 1e-9 && row.t < im.time + window - 1e-9) {
        r.after += row.stiffness.z();
        ++na;
      }
    }
    r.before = nb ? r.before / nb : std::nan("");
    r.after = na ? r.after / na : std::nan("");
    out.push_back(r);
  }
  return out;
}

/// Aggregates episode logs of one task. Deviation is measured against the
/// task's target at each logged time.
inline Summary summarize(std::span<const EpisodeLog> logs, const TaskEnv& env, int resamples = 1000,
                         std::uint64_t seed = 0, std::optional<double> baseline_reward = std::nullopt) {
  if (logs.empty()) throw DomainError("summarize: no logs");
  Rng probe(0);
  PlantConfig plant;
  TaskSimulation targets(env, plant, probe);
  Summary s;
  std::size_t longest = 0;
  for (const auto& log : logs) {
    TrialSummary t;
    t.seed = log.seed;
    t.steps = static_cast<int>(log.rows.size());
    t.terminated = log.terminated;
    for (const auto& r : log.rows) {
      t.mean_deviation += (r.state.pos - targets.target_at(r.t)).norm();
      t.mean_lambda += mean_stiffness_eigenvalue(r.stiffness);
      t.reward -= r.cost;
    }
    if (t.steps > 0) {
      t.mean_deviation /= t.steps;
      t.mean_lambda /= t.steps;
    }
    s.trials.push_back(t);
    longest = std::max(longest, log.rows.size());
  }
  for (std::size_t k = 0; k < longest; ++k) {
    for (const auto& log : logs) {
      if (k < log.rows.size() && std::abs(log.rows[k].t - logs[0].rows[std::min(k, logs[0].rows.size() - 1)].t) > 1e-9 &&
          k < logs[0].rows.size()) {
        throw DomainError("summarize: logs have mismatched time grids");
      }
    }
  }
  Rng rng(derive_seed(seed, 3));
  for (std::size_t k = 0; k < longest; ++k) {
    std::vector<double> dev, lam;
    TimestepSummary ts;
    for (const auto& log : logs) {
      if (k >= log.rows.size()) continue;
      const auto& r = log.rows[k];
      ts.t = r.t;
      dev.push_back((r.state.pos - targets.target_at(r.t)).norm());
      lam.push_back(mean_stiffness_eigenvalue(r.stiffness));
      ts.stiffness += r.stiffness;
      ts.force += r.force;
    }
    ts.trials = static_cast<int>(dev.size());
    ts.stiffness /= ts.trials;
    ts.force /= ts.trials;
    ts.deviation = bootstrap_ci(dev, resamples, rng);
    ts.lambda = bootstrap_ci(lam, resamples, rng);
    s.timesteps.push_back(ts);
  }
  for (const auto& t : s.trials) {
    s.mean_deviation += t.mean_deviation;
    s.mean_lambda += t.mean_lambda;
    s.mean_reward += t.reward;
  }
  const auto n = static_cast<double>(s.trials.size());
  s.mean_deviation /= n;
  s.mean_lambda /= n;
  s.mean_reward /= n;
  if (baseline_reward && *baseline_reward != 0.0) s.normalized_reward = s.mean_reward / std::abs(*baseline_reward);

  if (const auto* push = std::get_if<PushObject>(&env.variant)) {
    double early = 0.0, late = 0.0, fin = 0.0;
    int reached = 0, pattern = 0;
    for (const auto& log : logs) {
      const PushPhases p = push_phases(log, *push);
      fin += p.final_distance;
      if (p.reach_time) {
        ++reached;
        early += p.early_stiffness;
        late += p.late_stiffness;
      }
      if (p.stiff_then_compliant() && p.final_distance <= 0.02) ++pattern;
    }
    s.phases.emplace_back("push_reached_trials", reached);
    s.phases.emplace_back("push_early_stiffness", reached ? early / reached : std::nan(""));
    s.phases.emplace_back("push_late_stiffness", reached ? late / reached : std::nan(""));
    s.phases.emplace_back("push_final_distance", fin / n);
    s.phases.emplace_back("push_stiff_then_compliant_trials", pattern);
  } else if (std::holds_alternative<FallingObject>(env.variant)) {
    double before = 0.0, after = 0.0;
    int impacts = 0, rising = 0;
    for (const auto& log : logs) {
      for (const auto& r : impact_responses(log)) {
        ++impacts;
        before += r.before;
        after += r.after;
        if (r.after > r.before) ++rising;
      }
    }
    s.phases.emplace_back("impacts", impacts);
    s.phases.emplace_back("kz_before_impact", impacts ? before / impacts : std::nan(""));
    s.phases.emplace_back("kz_after_impact", impacts ? after / impacts : std::nan(""));
    s.phases.emplace_back("impacts_with_rising_kz", rising);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Trials and baselines

/// Trial i runs with seed base_seed + i.
template <StiffnessController Controller>
std::vector<EpisodeLog> run_trials(const TaskEnv& env, const PlantConfig& plant, Controller& controller,
                                   const CostWeights& weights, int trials, std::uint64_t base_seed) {
  std::vector<EpisodeLog> logs;
  logs.reserve(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i) {
    logs.push_back(run_episode(env, plant, controller, weights, base_seed + static_cast<std::uint64_t>(i)));
  }
  return logs;
}

/// Constant K with D = 2 sqrt(K); same log schema as the adaptive controller.
inline std::vector<EpisodeLog> fixed_stiffness_baseline(const TaskEnv& env, const PlantConfig& plant,
                                                        const Vec3& stiffness, int trials, std::uint64_t base_seed,
                                                        const CostWeights& weights, const Vec3& k_min = Vec3::Constant(0.1),
                                                        const Vec3& k_max = Vec3::Constant(1000.0)) {
  if ((stiffness.array() < k_min.array()).any() || (stiffness.array() > k_max.array()).any()) {
    throw DomainError("fixed_stiffness_baseline: stiffness outside bounds");
  }
  FixedStiffnessController c(stiffness);
  return run_trials(env, plant, c, weights, trials, base_seed);
}

// ---------------------------------------------------------------------------
// Grid-search oracle comparison

struct OracleRow {
  int index = 0;
  CartesianState state;
  Vec3 force = Vec3::Zero();
  Vec3 target = Vec3::Zero();
  Vec3 mpc_stiffness = Vec3::Zero();
  double mpc_cost = 0.0;    // cost of the planned sequence
  Vec3 grid_stiffness = Vec3::Zero();
  double grid_cost = 0.0;   // best constant-K sequence
  double ratio = 0.0;
  bool pass = false;
};

struct OracleReport {
  std::vector<OracleRow> rows;
  bool pass() const {
    return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const OracleRow& r) { return r.pass; });
  }

  static constexpr const char* kCsvHeader =
      "index,x,y,z,vx,vy,vz,fx,fy,fz,rx,ry,rz,mpc_Kx,mpc_Ky,mpc_Kz,mpc_cost,grid_Kx,grid_Ky,grid_Kz,grid_cost,ratio,"
      "pass";

  void write_csv(std::ostream& os) const {
    os << kCsvHeader << '\n';
    for (const auto& r : rows) {
      os << r.index;
      for (const Vec3* v : {&r.state.pos, &r.state.vel, &r.force, &r.target, &r.mpc_stiffness}) {
        for (int i = 0; i < 3; ++i) os << ',' << format_double((*v)[i]);
      }
      os << ',' << format_double(r.mpc_cost);
      for (int i = 0; i < 3; ++i) os << ',' << format_double(r.grid_stiffness[i]);
      os << ',' << format_double(r.grid_cost) << ',' << format_double(r.ratio) << ',' << (r.pass ? 1 : 0) << '\n';
    }
  }
};

/// Exhaustive search over constant stiffness triples on `grid` points per
/// free axis (linearly spaced over the bounds).
template <ProbabilisticDynamics Model>
std::pair<Vec3, double> grid_search_constant_stiffness(const Model& model, const CartesianState& s, const Vec3& force,
                                                       const Vec3& target, const MpcConfig& config,
                                                       const CostWeights& weights, int grid, Rng& rng) {
  const auto axes = config.free_axes();
  std::vector<ActionSequence> candidates;
  std::vector<int> idx(axes.size(), 0);
  while (true) {
    ActionSequence seq(config.horizon, static_cast<Eigen::Index>(axes.size()));
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const int i = axes[a];
      const double v = config.k_min[i] + (config.k_max[i] - config.k_min[i]) * idx[a] / (grid - 1);
      seq.col(static_cast<Eigen::Index>(a)).setConstant(v);
    }
    candidates.push_back(seq);
    std::size_t a = 0;
    while (a < idx.size() && ++idx[a] == grid) idx[a++] = 0;
    if (a == idx.size()) break;
  }
  MpcConfig single = config;
  const auto costs = score_stiffness_sequences(model, s, force, target, std::span<const ActionSequence>(candidates),
                                               single, weights, rng);
  const auto best = static_cast<std::size_t>(std::min_element(costs.begin(), costs.end()) - costs.begin());
  return {expand_stiffness(candidates[best], config).row(0).transpose(), costs[best]};
}

/// Compares mpc_step on the zero-variance analytic model with the constant-K
/// grid search at random states; a state passes when the planned cost is at
/// most (1 + tolerance) times the grid optimum.
inline OracleReport oracle_check(const PlantConfig& plant, MpcConfig mpc, const CostWeights& weights,
                                 const OracleConfig& oc, std::uint64_t seed) {
  AnalyticModel model(plant);
  mpc.particles = 1;
  Rng rng(derive_seed(seed, 4));
  OracleReport report;
  for (int i = 0; i < oc.states; ++i) {
    OracleRow row;
    row.index = i;
    row.state.pos = uniform_vec3(rng, -oc.position_range, oc.position_range);
    row.state.vel = uniform_vec3(rng, -oc.velocity_range, oc.velocity_range);
    row.force = uniform_vec3(rng, -oc.force_range, oc.force_range);
    row.target = uniform_vec3(rng, -oc.position_range, oc.position_range);
    const MpcStepResult r =
        mpc_step(model, row.state, row.force, row.target, std::nullopt, mpc, weights, mpc.k_min, rng);
    row.mpc_stiffness = r.stiffness;
    row.mpc_cost = r.diagnostics.best_cost;
    std::tie(row.grid_stiffness, row.grid_cost) =
        grid_search_constant_stiffness(model, row.state, row.force, row.target, mpc, weights, oc.grid, rng);
    row.ratio = row.grid_cost > 0.0 ? row.mpc_cost / row.grid_cost : (row.mpc_cost <= 0.0 ? 1.0 : INFINITY);
    row.pass = row.mpc_cost <= (1.0 + oc.tolerance) * row.grid_cost;
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepPoint {
  double alpha_q = 0.0;
  double alpha_r = 0.0;
};

/// Cross product of the listed values, each pair exactly once (alpha_q
/// major). An empty list stands for the base value.
inline std::vector<SweepPoint> sweep_points(const SweepConfig& s, const CostWeights& base) {
  const std::vector<double> qs = s.alpha_q.empty() ? std::vector<double>{base.alpha_q} : s.alpha_q;
  const std::vector<double> rs = s.alpha_r.empty() ? std::vector<double>{base.alpha_r} : s.alpha_r;
  std::vector<SweepPoint> out;
  for (double q : qs) {
    for (double r : rs) out.push_back({q, r});
  }
  return out;
}

}  // namespace mpvic

#endif  // MPVIC_HARNESS_HPP_
