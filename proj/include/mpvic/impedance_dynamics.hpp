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

// Closed-loop Cartesian impedance plant and the task environments built on it.
//
// With force sensing and inertia shaping the arm behaves exactly like a
// diagonal mass-spring-damper around the target x_r:
//
//   M xdd = K (x_r - x) - D xd + f_ext
//
// where f_ext is the external force acting on the end-effector. A constant
// push f_ext therefore settles at x - x_r = K^-1 f_ext. Integration uses
// semi-implicit Euler with fixed inner substeps.

#ifndef MPVIC_IMPEDANCE_DYNAMICS_HPP_
#define MPVIC_IMPEDANCE_DYNAMICS_HPP_

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mpvic/common.hpp"

namespace mpvic {

inline constexpr double kGravity = 9.81;

struct ImpedanceParams {
  Vec3 mass = Vec3::Ones();
  Vec3 damping = Vec3::Constant(2.0);
  Vec3 stiffness = Vec3::Ones();

  void validate() const {
    if (!mass.allFinite() || !damping.allFinite() || !stiffness.allFinite()) {
      throw DomainError("impedance parameters must be finite");
    }
    if ((mass.array() <= 0.0).any() || (damping.array() <= 0.0).any() ||
        (stiffness.array() <= 0.0).any()) {
      throw DomainError("impedance parameters must be strictly positive");
    }
  }
};

/// D = 2 sqrt(K) elementwise.
inline Vec3 damping_from_stiffness(const Vec3& stiffness) {
  if (!stiffness.allFinite() || (stiffness.array() < 0.0).any()) {
    throw DomainError("damping_from_stiffness: stiffness must be finite and non-negative");
  }
  return 2.0 * stiffness.array().sqrt();
}

inline ImpedanceParams make_impedance(const Vec3& stiffness, const Vec3& mass = Vec3::Ones()) {
  return {mass, damping_from_stiffness(stiffness), stiffness};
}

struct PlantConfig {
  Vec3 mass = Vec3::Ones();
  double workspace_radius = 1.0;
  double dt = 0.01;            // low-level controller period (100 Hz)
  double max_substep = 1e-4;   // inner integration step
  double control_period = 0.1; // MPC period (10 Hz)

  int substeps(double duration) const {
    return std::max(1, static_cast<int>(std::ceil(duration / max_substep - 1e-9)));
  }
  int plant_steps_per_control() const {
    return static_cast<int>(std::lround(control_period / dt));
  }

  void validate() const {
    if (!mass.allFinite() || (mass.array() <= 0.0).any()) throw ConfigError("plant.mass must be positive");
    if (!(workspace_radius > 0.0)) throw ConfigError("plant.workspace_radius must be positive");
    if (!(dt > 0.0 && dt <= 0.1)) throw ConfigError("plant.dt must lie in (0, 0.1]");
    if (!(max_substep > 0.0 && max_substep <= dt)) throw ConfigError("plant.max_substep must lie in (0, dt]");
    const double ratio = control_period / dt;
    if (!(control_period > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9) {
      throw ConfigError("plant.control_period must be a positive multiple of plant.dt");
    }
  }
};

inline void check_state(const CartesianState& s, double workspace_radius) {
  if (!s.finite()) throw NonFiniteError("plant state became non-finite");
  if (s.pos.norm() > workspace_radius) {
    throw WorkspaceError("end-effector left the workspace (|pos| = " + format_double(s.pos.norm()) + " m)");
  }
}

namespace detail {

// One semi-implicit Euler substep; velocity first, position with the new velocity.
inline void integrate_substep(CartesianState& s, const ImpedanceParams& p, const Vec3& target,
                              const Vec3& f_ext, double h) {
  const Vec3 accel = (p.stiffness.cwiseProduct(target - s.pos) - p.damping.cwiseProduct(s.vel) + f_ext)
                         .cwiseQuotient(p.mass);
  s.vel += h * accel;
  s.pos += h * s.vel;
}

}  // namespace detail

/// Advances the closed loop by dt under constant f_ext and target.
inline CartesianState step_closed_loop(const CartesianState& state, const ImpedanceParams& params,
                                       const Vec3& target, const Vec3& f_ext, double dt,
                                       double max_substep = 1e-4, double workspace_radius = 1.0) {
  params.validate();
  if (!(dt > 0.0 && dt <= 0.1)) throw DomainError("step_closed_loop: dt must lie in (0, 0.1]");
  if (!target.allFinite() || !f_ext.allFinite()) throw NonFiniteError("step_closed_loop: non-finite input");
  const int n = std::max(1, static_cast<int>(std::ceil(dt / max_substep - 1e-9)));
  const double h = dt / n;
  CartesianState s = state;
  for (int i = 0; i < n; ++i) detail::integrate_substep(s, params, target, f_ext, h);
  check_state(s, workspace_radius);
  return s;
}

/// Stored energy relative to the target (zero reference velocity).
inline double impedance_energy(const CartesianState& s, const ImpedanceParams& p, const Vec3& target) {
  const Vec3 dx = target - s.pos;
  return 0.5 * (p.mass.cwiseProduct(s.vel.cwiseAbs2())).sum() + 0.5 * (p.stiffness.cwiseProduct(dx.cwiseAbs2())).sum();
}

// ---------------------------------------------------------------------------
// Task environments

struct ComplianceHold {
  double amplitude = 10.0;       // N
  double noise_halfwidth = 5.0;  // N, uniform
  double period = 4.0;           // s
  int axis = 0;
};

struct FallingObject {
  double first_drop = 2.0;      // s
  double drop_interval = 2.0;   // s
  int drop_count = 4;
  std::vector<double> masses;   // kg; empty -> sampled from mass_range per trial
  double mass_min = 0.5;
  double mass_max = 3.0;
  double height_min = 0.5;      // m
  double height_max = 1.0;
  double gravity = kGravity;
};

struct PushObject {
  double command_time = 1.0;               // s, target switches to start + push_delta
  Vec3 push_delta = Vec3(0.1, 0.1, 0.0);   // m
  double mass_min = 0.5;                   // kg, sampled per trial
  double mass_max = 3.0;
  double static_friction = 0.5;
  double kinetic_friction = 0.5;
  double gravity = kGravity;
  double contact_stiffness = 1e4;          // N/m, unilateral
  double fixed_z_stiffness = 1000.0;       // N/m, excluded from the search

  Vec3 axis() const { return push_delta.normalized(); }
};

using TaskVariant = std::variant<ComplianceHold, FallingObject, PushObject>;

struct TaskEnv {
  std::string name = "compliance";
  Vec3 start = Vec3::Zero();    // initial position and rest target
  double duration = 10.0;       // s
  double force_noise_std = 0.0; // N, additive sensor noise on the reading
  TaskVariant variant = ComplianceHold{};

  /// Number of control steps per episode.
  int horizon(const PlantConfig& plant) const {
    return static_cast<int>(std::lround(duration / plant.control_period));
  }

  void validate(const PlantConfig& plant) const {
    if (!(duration > 0.0) || horizon(plant) < 1) throw ConfigError("task.duration must cover at least one control step");
    if (!(force_noise_std >= 0.0)) throw ConfigError("task.force_noise_std must be non-negative");
    if (start.norm() > plant.workspace_radius) throw ConfigError("task.start lies outside the workspace");
    std::visit(
        [](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, ComplianceHold>) {
            if (!(v.amplitude >= 0.0 && v.noise_halfwidth >= 0.0 && v.period > 0.0)) {
              throw ConfigError("compliance: amplitude, noise must be >= 0 and period > 0");
            }
            if (v.axis < 0 || v.axis > 2) throw ConfigError("compliance: axis must be 0, 1 or 2");
          } else if constexpr (std::is_same_v<T, FallingObject>) {
            if (!(v.drop_interval > 0.0 && v.first_drop >= 0.0 && v.drop_count >= 0)) {
              throw ConfigError("falling: invalid drop schedule");
            }
            for (double m : v.masses) {
              if (!(m > 0.0)) throw ConfigError("falling: masses must be positive");
            }
            if (!(v.mass_min > 0.0 && v.mass_max >= v.mass_min)) throw ConfigError("falling: invalid mass range");
            if (!(v.height_min >= 0.0 && v.height_max >= v.height_min)) throw ConfigError("falling: invalid height range");
            if (!(v.gravity > 0.0)) throw ConfigError("falling: gravity must be positive");
          } else {
            if (!(v.mass_min > 0.0 && v.mass_max >= v.mass_min)) throw ConfigError("push: invalid mass range");
            if (!(v.static_friction >= 0.0 && v.kinetic_friction >= 0.0)) throw ConfigError("push: friction must be >= 0");
            if (!(v.contact_stiffness > 0.0 && v.gravity > 0.0)) throw ConfigError("push: invalid contact/gravity");
            if (!(v.push_delta.norm() > 0.0)) throw ConfigError("push: push_delta must be non-zero");
            if (!(v.fixed_z_stiffness > 0.0)) throw ConfigError("push: fixed_z_stiffness must be positive");
          }
        },
        variant);
  }
};

/// Sinusoidal disturbance with uniform noise along one axis.
inline Vec3 compliance_force(double t, double amplitude, double noise_halfwidth, Rng& rng, double period = 4.0,
                             int axis = 0) {
  double f = amplitude * std::sin(2.0 * std::numbers::pi * t / period);
  if (noise_halfwidth > 0.0) {
    std::uniform_real_distribution<double> noise(-noise_halfwidth, noise_halfwidth);
    f += noise(rng);
  }
  Vec3 out = Vec3::Zero();
  out[axis] = f;
  return out;
}

// ---------------------------------------------------------------------------
// Falling objects

struct DropEvent {
  double time = 0.0;
  double mass = 0.0;
  double height = 0.0;
};

struct ImpactEvent {
  double time = 0.0;
  double mass = 0.0;
  double delta_vz = 0.0;
};

struct FallingObjectState {
  std::vector<DropEvent> schedule;
  std::size_t next = 0;
  double carried_mass = 0.0;
};

inline FallingObjectState make_drop_schedule(const FallingObject& env, Rng& rng) {
  FallingObjectState st;
  std::uniform_real_distribution<double> height(env.height_min, env.height_max);
  std::uniform_real_distribution<double> mass(env.mass_min, env.mass_max);
  for (int i = 0; i < env.drop_count; ++i) {
    DropEvent e;
    e.time = env.first_drop + i * env.drop_interval;
    e.mass = env.masses.empty() ? mass(rng) : env.masses[static_cast<std::size_t>(i) % env.masses.size()];
    e.height = height(rng);
    st.schedule.push_back(e);
  }
  return st;
}

struct FallingStep {
  Vec3 force = Vec3::Zero();
  std::optional<ImpactEvent> impact;
};

/// Applies any drop due at time t (perfectly inelastic impact on the z axis)
/// and returns the weight force of everything carried. Once the schedule is
/// exhausted no further events occur.
inline FallingStep falling_object_step(const FallingObject& env, FallingObjectState& objects, CartesianState& state,
                                       double t, double virtual_mass_z = 1.0) {
  FallingStep out;
  if (objects.next < objects.schedule.size() && t + 1e-12 >= objects.schedule[objects.next].time) {
    const DropEvent& drop = objects.schedule[objects.next++];
    const double impact_speed = std::sqrt(2.0 * env.gravity * drop.height);
    const double dv = -drop.mass * impact_speed / (objects.carried_mass + virtual_mass_z + drop.mass);
    state.vel.z() += dv;
    objects.carried_mass += drop.mass;
    out.impact = ImpactEvent{t, drop.mass, dv};
  }
  out.force = Vec3(0.0, 0.0, -objects.carried_mass * env.gravity);
  return out;
}

// ---------------------------------------------------------------------------
// Pushing

/// Object constrained to the push axis; position measured from its start.
struct PushObjectState {
  double position = 0.0;
  double velocity = 0.0;
  bool operator==(const PushObjectState&) const = default;
};

/// Coulomb stick/slip under a non-negative contact force along the push axis.
inline PushObjectState coulomb_step(const PushObjectState& obj, double contact_force, double mass, double mu_static,
                                    double mu_kinetic, double gravity, double dt) {
  PushObjectState next = obj;
  const double normal = mass * gravity;
  if (obj.velocity <= 0.0) {
    if (contact_force <= mu_static * normal) {
      next.velocity = 0.0;
      return next;
    }
  }
  const double accel = (contact_force - mu_kinetic * normal) / mass;
  // friction alone can decelerate to rest but never reverse the motion
  next.velocity = std::max(0.0, obj.velocity + dt * accel);
  next.position = obj.position + dt * next.velocity;
  return next;
}

struct PushStep {
  PushObjectState object;
  Vec3 reaction = Vec3::Zero();  // force on the robot
  double contact_force = 0.0;
};

/// Contact force from penetration of the robot into the object face, then one
/// Coulomb step. `robot_progress` is the robot displacement along the push axis.
inline PushStep push_object_step(const PushObject& env, double object_mass, double robot_progress,
                                 const PushObjectState& obj, double dt) {
  PushStep out;
  const double penetration = robot_progress - obj.position;
  out.contact_force = penetration > 0.0 ? env.contact_stiffness * penetration : 0.0;
  out.object = coulomb_step(obj, out.contact_force, object_mass, env.static_friction, env.kinetic_friction,
                            env.gravity, dt);
  out.reaction = -out.contact_force * env.axis();
  return out;
}

// ---------------------------------------------------------------------------
// Per-episode simulation

/// Owns the robot and object state of a single episode.
class TaskSimulation {
 public:
  TaskSimulation(TaskEnv env, PlantConfig plant, Rng& rng) : env_(std::move(env)), plant_(plant), rng_(rng) {
    env_.validate(plant_);
    plant_.validate();
    state_.pos = env_.start;
    if (auto* f = std::get_if<FallingObject>(&env_.variant)) {
      falling_ = make_drop_schedule(*f, rng_);
    } else if (auto* p = std::get_if<PushObject>(&env_.variant)) {
      std::uniform_real_distribution<double> mass(p->mass_min, p->mass_max);
      object_mass_ = mass(rng_);
    }
    refresh_force();
  }

  const TaskEnv& env() const { return env_; }
  const PlantConfig& plant() const { return plant_; }
  double time() const { return time_; }
  const CartesianState& state() const { return state_; }
  const PushObjectState& object() const { return object_; }
  double object_mass() const { return object_mass_; }
  const std::vector<ImpactEvent>& impacts() const { return impacts_; }
  const FallingObjectState& drops() const { return falling_; }

  Vec3 target() const { return target_at(time_); }

  Vec3 target_at(double t) const {
    if (const auto* p = std::get_if<PushObject>(&env_.variant)) {
      if (t + 1e-12 >= p->command_time) return env_.start + p->push_delta;
    }
    return env_.start;
  }

  /// Force reading available to the controller at the current time.
  Vec3 sensed_force() {
    if (env_.force_noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, env_.force_noise_std);
      Vec3 f = force_;
      for (int i = 0; i < 3; ++i) f[i] += noise(rng_);
      return f;
    }
    return force_;
  }

  /// Physical force currently acting on the end-effector.
  const Vec3& true_force() const { return force_; }

  /// World-frame object position (push task only).
  Vec3 object_world_position() const {
    if (const auto* p = std::get_if<PushObject>(&env_.variant)) return env_.start + object_.position * p->axis();
    return Vec3::Zero();
  }

  /// Integrates one control period with the given impedance, plant step by plant step.
  void advance(const ImpedanceParams& params) {
    params.validate();
    const int steps = plant_.plant_steps_per_control();
    for (int i = 0; i < steps; ++i) plant_step(params);
  }

  void plant_step(const ImpedanceParams& params) {
    const double dt = plant_.dt;
    const int n = plant_.substeps(dt);
    const double h = dt / n;
    const Vec3 target = target_at(time_);
    if (auto* p = std::get_if<PushObject>(&env_.variant)) {
      const Vec3 axis = p->axis();
      for (int i = 0; i < n; ++i) {
        const double progress = (state_.pos - env_.start).dot(axis);
        const PushStep contact = push_object_step(*p, object_mass_, progress, object_, h);
        detail::integrate_substep(state_, params, target, contact.reaction, h);
        object_ = contact.object;
        force_ = contact.reaction;
      }
    } else {
      // compliance force was sampled for this step by refresh_force()
      if (auto* f = std::get_if<FallingObject>(&env_.variant)) {
        FallingStep fs = falling_object_step(*f, falling_, state_, time_, plant_.mass.z());
        if (fs.impact) impacts_.push_back(*fs.impact);
        force_ = fs.force;
      }
      for (int i = 0; i < n; ++i) detail::integrate_substep(state_, params, target, force_, h);
    }
    ++plant_steps_;
    time_ = plant_steps_ * dt;
    check_state(state_, plant_.workspace_radius);
    refresh_force();
  }

 private:
  // Force held over the next plant step (also what the sensor reads now).
  void refresh_force() {
    if (const auto* f = std::get_if<FallingObject>(&env_.variant)) {
      force_ = Vec3(0.0, 0.0, -falling_.carried_mass * f->gravity);
    } else if (const auto* p = std::get_if<PushObject>(&env_.variant)) {
      const double progress = (state_.pos - env_.start).dot(p->axis());
      const double penetration = progress - object_.position;
      force_ = -(penetration > 0.0 ? p->contact_stiffness * penetration : 0.0) * p->axis();
    } else if (const auto* c = std::get_if<ComplianceHold>(&env_.variant)) {
      force_ = compliance_force(time_, c->amplitude, c->noise_halfwidth, rng_, c->period, c->axis);
    }
  }

  TaskEnv env_;
  PlantConfig plant_;
  Rng& rng_;
  CartesianState state_;
  Vec3 force_ = Vec3::Zero();
  double time_ = 0.0;
  long plant_steps_ = 0;
  FallingObjectState falling_;
  std::vector<ImpactEvent> impacts_;
  PushObjectState object_;
  double object_mass_ = 0.0;
};

}  // namespace mpvic

#endif  // MPVIC_IMPEDANCE_DYNAMICS_HPP_
