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

#ifndef FOLDSIM_ROUTER_H_
#define FOLDSIM_ROUTER_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "foldsim/collectives.h"
#include "foldsim/tensor.h"
#include "foldsim/topology.h"

namespace foldsim {

enum class GateFn { kSoftmax, kSigmoid };
enum class DropMode { kSubSequence, kFullSequence };
enum class DropPriority { kPosition, kProbability };

std::string_view GateFnName(GateFn fn);
std::string_view DropModeName(DropMode mode);
std::string_view DropPriorityName(DropPriority priority);

struct GatingParams {
  Matrix gate_weights;  // [hidden x num_experts]
  int top_k = 1;
  GateFn gate_fn = GateFn::kSoftmax;
  bool renormalize_topk = false;
  // Unset means dropless.
  std::optional<double> capacity_factor;
  DropMode drop_mode = DropMode::kSubSequence;
  DropPriority drop_priority = DropPriority::kPosition;

  int num_experts() const { return static_cast<int>(gate_weights.cols()); }
  int hidden() const { return static_cast<int>(gate_weights.rows()); }
  bool dropless() const { return !capacity_factor.has_value(); }
  void Validate() const;
};

struct ExpertChoice {
  int expert = 0;
  double gate = 0.0;
  bool kept = true;
};

struct TokenRoute {
  std::int64_t position = 0;
  // Ordered by descending score, ties broken by lower expert id.
  std::vector<ExpertChoice> choices;
};

struct RoutingDecision {
  int num_experts = 0;
  std::vector<TokenRoute> tokens;
  // G(x W_g) for every token and expert. Empty for decisions rebuilt from
  // gathered routing pairs.
  Matrix scores;

  std::size_t kept_pairs() const;
};

// Seeded U[-1/sqrt(hidden), 1/sqrt(hidden)] router weights.
Matrix InitGateWeights(int hidden, int num_experts, std::uint64_t seed);

// Scores every token and keeps the top_k experts per token.
RoutingDecision ComputeGates(const Matrix& tokens,
                             std::span<const std::int64_t> positions,
                             const GatingParams& params);

// max(1, floor(capacity_factor * scope_tokens / num_experts)).
int ExpertCapacity(double capacity_factor, std::size_t scope_tokens,
                   int num_experts);

// Marks pairs beyond each expert's capacity as dropped. Pairs compete in
// drop_priority order; already-dropped pairs stay dropped and use no slot.
RoutingDecision ApplyCapacity(RoutingDecision decision,
                              std::size_t scope_tokens,
                              const GatingParams& params);

// Full-sequence dropping: members of `sequence_group` exchange their routing
// pairs, apply capacity once over the union, and each keeps the drop flags of
// its own tokens. local[i] belongs to member i.
std::vector<RoutingDecision> GatherFullSequenceDecision(
    SimWorld& world, const RankGroup& sequence_group,
    std::span<const RoutingDecision> local, const GatingParams& params);

struct LoadStats {
  std::vector<std::size_t> counts;  // kept pairs per expert
  double imbalance = 0.0;           // max / mean, 0 when nothing is kept
  // E * sum_e f_e * P_e with f_e the fraction of tokens whose top-1 choice is
  // e and P_e the mean score of e. Equals 1 under perfectly uniform routing.
  double aux_loss = 0.0;
};

LoadStats ComputeLoadStats(const RoutingDecision& decision, int num_experts);

// Gradient of the loss w.r.t. the router logits x W_g given the gradient
// w.r.t. every chosen gate value (gate_grads[token][choice]). Dropped choices
// must carry zero gradient.
Matrix GateLogitGradient(const RoutingDecision& decision,
                         const GatingParams& params,
                         const std::vector<std::vector<double>>& gate_grads);

}  // namespace foldsim

#endif  // FOLDSIM_ROUTER_H_
