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

#ifndef MPVIC_MPVIC_HPP_
#define MPVIC_MPVIC_HPP_

#include "mpvic/common.hpp"
#include "mpvic/impedance_dynamics.hpp"
#include "mpvic/penn.hpp"
#include "mpvic/cem.hpp"
#include "mpvic/controller.hpp"
#include "mpvic/explorer.hpp"
#include "mpvic/harness.hpp"

#endif  // MPVIC_MPVIC_HPP_
