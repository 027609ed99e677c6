/* Copyright 2026 The Foldsim Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef FOLDSIM_TENSOR_H_
#define FOLDSIM_TENSOR_H_

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace foldsim {

// Row-major so that a token block is one contiguous row per token, which is
// the layout every collective payload uses.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Independent random streams derived from one user seed. Each consumer of
// randomness (inputs, gate weights, expert weights, upstream gradients) gets
// its own stream id so changing one does not perturb the others.
enum class RandomStream : std::uint64_t {
  kTokens = 1,
  kGateWeights = 2,
  kExpertWeights = 3,
  kUpstream = 4,
};

std::mt19937_64 MakeEngine(std::uint64_t seed, RandomStream stream);

// Fills a rows x cols matrix row by row with U[lo, hi).
Matrix UniformMatrix(std::mt19937_64& engine, Eigen::Index rows,
                     Eigen::Index cols, double lo, double hi);

// max|a - b| / max(max|b|, tiny). Shapes must match.
double MaxRelativeError(const Matrix& actual, const Matrix& expected);

}  // namespace foldsim

#endif  // FOLDSIM_TENSOR_H_
