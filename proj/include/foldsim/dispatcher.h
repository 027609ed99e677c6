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

#ifndef FOLDSIM_DISPATCHER_H_
#define FOLDSIM_DISPATCHER_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "foldsim/collectives.h"
#include "foldsim/experts.h"
#include "foldsim/router.h"
#include "foldsim/tensor.h"
#include "foldsim/topology.h"

namespace foldsim {

// Where every kept (token, choice) pair goes. Permuted rows are ordered by
// destination EP rank, then local expert, then original (token, choice)
// order, so rows for one expert are contiguous.
struct DispatchPlan {
  int ep_size = 1;
  int local_experts = 1;
  std::size_t num_tokens = 0;
  std::vector<std::size_t> source_token;   // permuted row -> token
  std::vector<std::size_t> source_choice;  // permuted row -> choice slot
  std::vector<int> expert;                 // permuted row -> global expert
  std::vector<double> gates;               // permuted row -> gate value
  // [ep peer][local expert] rows this rank sends.
  std::vector<std::vector<std::size_t>> send_counts;
  // [ep peer][local expert] rows this rank received; filled at dispatch.
  std::vector<std::vector<std::size_t>> recv_counts;

  std::size_t kept_pairs() const { return source_token.size(); }
  // Rows addressed to each EP peer.
  std::vector<std::size_t> PeerSendRows() const;
  std::vector<std::size_t> PeerRecvRows() const;
};

// Expert e lives on EP rank e / local_experts.
DispatchPlan BuildDispatchPlan(const RoutingDecision& decision, int ep_size,
                               int local_experts);

// Copies block rows into plan order, one row per kept pair.
Matrix Permute(const Matrix& block, const DispatchPlan& plan);

// Restores token order, scaling each pair's row by its gate and summing the
// pairs of a token. Tokens with no kept pair get a zero row.
Matrix UnpermuteCombine(const Matrix& expert_out, const DispatchPlan& plan);

// Same as UnpermuteCombine without gate scaling.
Matrix UnpermuteSum(const Matrix& rows, const DispatchPlan& plan);

// A rank's flattened tokens. positions are global row ids, which double as
// sequence positions for drop priority.
struct TokenBlock {
  int rank = 0;
  Matrix values;  // [rows x hidden]
  std::vector<std::int64_t> positions;
};

// Router plus per-rank expert shards.
struct MoeLayer {
  GatingParams gating;
  std::vector<ExpertWeights> rank_experts;  // indexed by rank
};

// Gives rank r the experts of its EP coordinate, sliced by its ETP
// coordinate.
MoeLayer DistributeMoeLayer(GatingParams gating, const ExpertParams& experts,
                            const ParallelTopology& topology);

// Per-rank state saved by the forward pass.
struct RankMoeState {
  Matrix input;
  RoutingDecision decision;
  DispatchPlan plan;
  // Rows received over EP are reordered by (local expert, sender) before the
  // ETP gather; landed_from_recv[i] is the receive row of landed row i.
  std::vector<std::size_t> landed_from_recv;
  std::vector<std::size_t> landed_expert_counts;
  // ETP gather layout: member m's landed rows start at member_offsets[m].
  std::vector<std::size_t> member_offsets;
  std::vector<std::vector<std::size_t>> member_expert_counts;
  std::size_t gathered_rows = 0;
  std::vector<std::vector<std::size_t>> expert_rows;  // per local expert
  std::vector<ExpertActivations> expert_acts;         // per local expert
  Matrix returned;  // full expert outputs in plan order
};

struct MoeContext {
  ParallelTopology topology;
  GroupSets groups;
  MoeLayer layer;
  std::vector<RankMoeState> ranks;
};

struct MoeForwardResult {
  std::vector<TokenBlock> outputs;
  MoeContext context;
};

// permute -> a2a-v (EP) -> all-gather-v (ETP) -> expert shards ->
// reduce-scatter-v (ETP) -> a2a-v (EP) -> unpermute + gate combine.
// Needs pp == 1; pipeline stages only exist in the cost model.
MoeForwardResult MoeForward(SimWorld& world, std::span<const TokenBlock> inputs,
                            const MoeLayer& layer,
                            const ParallelTopology& topology);

struct RankGradients {
  Matrix d_input;
  Matrix d_gate_weights;
  std::vector<Matrix> d_w1;  // per local expert shard
  std::vector<Matrix> d_w2;
};

// Gradients of sum(<upstream, output>). The gathers and scatters of the
// forward pass swap roles; weight gradients are this rank's contribution.
std::vector<RankGradients> MoeBackward(SimWorld& world,
                                       std::span<const Matrix> upstream,
                                       const MoeContext& context);

// Sums expert-shard gradients over EDP groups and router gradients over all
// ranks, leaving every replica with the full gradient.
void ReduceWeightGradients(SimWorld& world, const MoeContext& context,
                           std::vector<RankGradients>& grads);

}  // namespace foldsim

#endif  // FOLDSIM_DISPATCHER_H_
