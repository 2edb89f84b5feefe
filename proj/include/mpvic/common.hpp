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

#ifndef MPVIC_COMMON_HPP_
#define MPVIC_COMMON_HPP_

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>

namespace mpvic {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Rng = std::mt19937_64;

inline constexpr int kStateDim = 6;
inline constexpr int kActionDim = 3;
// [pos(3), vel(3), K(3), f_ext(3), s_r(3)]
inline constexpr int kInputDim = 15;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument outside an operation's mathematical domain (negative stiffness etc).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// End-effector left the configured workspace ball.
class WorkspaceError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure while fitting the model; carries the offending member/epoch in the message.
class TrainingError : public Error {
 public:
  using Error::Error;
};

struct CartesianState {
  Vec3 pos = Vec3::Zero();
  Vec3 vel = Vec3::Zero();

  Vec6 vector() const {
    Vec6 s;
    s << pos, vel;
    return s;
  }

  static CartesianState from_vector(const Eigen::Ref<const Vec6>& s) {
    return {s.head<3>(), s.tail<3>()};
  }

  bool finite() const { return pos.allFinite() && vel.allFinite(); }

  bool operator==(const CartesianState&) const = default;
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

/// Uniform sample in [lo, hi] per component.
inline Vec3 uniform_vec3(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Vec3 v;
  for (int i = 0; i < 3; ++i) v[i] = dist(rng);
  return v;
}

inline Vec3 uniform_vec3(Rng& rng, const Vec3& lo, const Vec3& hi) {
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    std::uniform_real_distribution<double> dist(lo[i], hi[i]);
    v[i] = dist(rng);
  }
  return v;
}

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw Error("format_double: conversion failed");
  return std::string(buf.data(), end);
}

inline double parse_double(std::string_view text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error("parse_double: invalid number '" + std::string(text) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

/// 64-bit FNV-1a, used for config hashes in run manifests.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Derives an independent stream seed; keeps per-trial RNGs decorrelated.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace mpvic

#endif  // MPVIC_COMMON_HPP_
