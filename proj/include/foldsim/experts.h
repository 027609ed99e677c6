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

#ifndef FOLDSIM_EXPERTS_H_
#define FOLDSIM_EXPERTS_H_

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "foldsim/tensor.h"

namespace foldsim {

enum class Activation { kRelu, kGelu };

std::string_view ActivationName(Activation act);
std::optional<Activation> ParseActivation(std::string_view name);

double Activate(Activation act, double z);
double ActivateDerivative(Activation act, double z);

// Unsharded expert FFNs: y = act(x W1) W2, no biases.
struct ExpertParams {
  std::vector<Matrix> w1;  // [hidden x ffn] per expert
  std::vector<Matrix> w2;  // [ffn x hidden] per expert
  Activation activation = Activation::kRelu;

  int num_experts() const { return static_cast<int>(w1.size()); }
  int hidden() const { return w1.empty() ? 0 : static_cast<int>(w1[0].rows()); }
  int ffn() const { return w1.empty() ? 0 : static_cast<int>(w1[0].cols()); }
};

// Seeded U[-1/sqrt(hidden), 1/sqrt(hidden)] for every expert, W1 then W2,
// expert by expert.
ExpertParams InitExpertParams(int num_experts, int hidden, int ffn,
                              std::uint64_t seed,
                              Activation activation = Activation::kRelu);

struct ExpertShard {
  int expert = 0;
  Matrix w1;  // [hidden x ffn/etp_size], column slice etp_rank
  Matrix w2;  // [ffn/etp_size x hidden], row slice etp_rank
};

// The expert shards held by one rank.
struct ExpertWeights {
  int etp_rank = 0;
  int etp_size = 1;
  Activation activation = Activation::kRelu;
  std::vector<ExpertShard> experts;

  const ExpertShard& Shard(int expert) const;
  bool Holds(int expert) const;
};

// Column-slices W1 and row-slices W2 of experts [first, first + count).
ExpertWeights ShardExperts(const ExpertParams& full, int first_expert,
                           int count, int etp_rank, int etp_size);

// All experts, one ExpertWeights per ETP rank. Every shard is cut from the
// same full matrices, so concatenating shards recovers the etp=1 weights.
std::vector<ExpertWeights> InitExpertWeights(
    int num_experts, int hidden, int ffn, int etp_size, std::uint64_t seed,
    Activation activation = Activation::kRelu);

struct ExpertActivations {
  Matrix input;           // [rows x hidden]
  Matrix pre_activation;  // [rows x ffn/etp_size]
};

// act(x W1_shard) W2_shard. Summing the partials over the ETP group gives the
// full expert output.
Matrix ExpertForwardShard(const Matrix& tokens, const ExpertWeights& weights,
                          int expert, ExpertActivations* saved = nullptr);

struct ExpertShardGrads {
  Matrix d_input;  // partial; sums over the ETP group to the full gradient
  Matrix d_w1;
  Matrix d_w2;
};

ExpertShardGrads ExpertBackwardShard(const Matrix& upstream,
                                     const ExpertActivations& saved,
                                     const ExpertWeights& weights, int expert);

}  // namespace foldsim

#endif  // FOLDSIM_EXPERTS_H_
