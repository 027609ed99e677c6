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

#ifndef FOLDSIM_COSTMODEL_H_
#define FOLDSIM_COSTMODEL_H_

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "foldsim/collectives.h"
#include "foldsim/dispatcher.h"
#include "foldsim/router.h"
#include "foldsim/topology.h"

namespace foldsim {

struct ModelDims {
  int hidden = 16;
  int ffn = 32;
  int num_experts = 4;
  int top_k = 1;
  int layers = 1;
  int seq_len = 64;  // tokens per sequence
  int batch = 1;     // sequences per step, across all DP ranks
  int elem_bytes = 2;

  void Validate() const;
  // batch * seq_len / (dp * cp * tp).
  std::size_t TokensPerRank(const ParallelTopology& topology) const;
};

// Uniform routing with no drops.
struct BalancedLoad {
  bool route_gather = false;  // full-sequence dropping with a capacity
  bool include_backward = true;
};

// Actual routing counts from a simulation. Needs pp == 1.
struct PlanLoad {
  std::vector<DispatchPlan> plans;        // indexed by rank
  std::vector<std::size_t> local_tokens;  // indexed by rank
  bool route_gather = false;
  bool include_backward = true;
};

using LayerLoad = std::variant<BalancedLoad, PlanLoad>;

// One communication step of an MoE layer. Byte totals cover every rank of one
// pipeline stage; the time is the slowest rank's bytes over the bandwidth of
// the slowest link class any group of this step touches, plus one latency.
struct CommCost {
  std::string name;
  Primitive primitive = Primitive::kAllToAllV;
  std::string group;  // "ep", "etp", "edp", "seq", "stage"
  double bytes_intra = 0.0;
  double bytes_inter = 0.0;
  double max_rank_bytes = 0.0;
  Span span = Span::kIntra;
  int node_count = 1;
  double time_s = 0.0;

  double bytes() const { return bytes_intra + bytes_inter; }
};

// Estimated cost of one training step. Communication and compute never
// overlap, so the MFU estimate is a lower bound on what an overlapped
// schedule would reach.
struct CostReport {
  ParallelTopology topology;
  std::vector<CommCost> comms;  // one MoE layer
  double expert_flops = 0.0;    // per rank, one layer
  double compute_time_s = 0.0;  // one layer
  double comm_time_s = 0.0;     // one layer
  double layers_per_stage = 1.0;
  double p2p_bytes = 0.0;   // per step, all stage boundaries
  double p2p_time_s = 0.0;  // per step
  double step_time_s = 0.0;
  double mfu_estimate = 0.0;

  double Bytes(Primitive primitive) const;
  double Bytes(Primitive primitive, Span span) const;
  double MoeCommTime() const;  // EP and ETP steps only
  // Widest span among the EP/ETP steps that move bytes.
  Span MoeSpan() const;
  const CommCost* Find(const std::string& name) const;
};

// Flops per rank per layer use 2 flops per multiply-add in the forward pass
// and twice that in the backward pass, for each of the two expert matrices:
// 12 * rows * hidden * ffn_shard with backward, 4 * ... without.
CostReport EstimateLayerCost(const ParallelTopology& topology,
                             const ModelDims& dims, const ClusterModel& cluster,
                             const LayerLoad& load);

// Same, with explicit rank groups (e.g. a legacy layout).
CostReport EstimateLayerCost(const ParallelTopology& topology,
                             const GroupSets& groups, const ModelDims& dims,
                             const ClusterModel& cluster,
                             const LayerLoad& load);

// Per-rank bytes of weights, their gradients, and saved activations for the
// layers of one stage.
double EstimateMemoryBytes(const ParallelTopology& topology,
                           const ModelDims& dims);

struct SearchConstraints {
  std::optional<double> memory_limit_bytes;
};

// Every (tp, cp, pp, ep, etp) for world_size under the default layout that
// passes, in order: degree divisibility, ep <= E with E % ep == 0,
// ffn % etp == 0, seq_len % (tp*cp) == 0, batch % dp == 0, layers % pp == 0,
// PP consistency, and the optional memory ceiling. Sorted lexicographically
// by (tp, cp, pp, ep, etp).
std::vector<ParallelTopology> EnumerateValidConfigs(
    int world_size, const ModelDims& dims,
    const SearchConstraints& constraints = {});

// Balanced estimates for every valid config, fastest first; ties keep the
// lexicographic degree order.
std::vector<CostReport> SearchBestConfig(
    int world_size, const ModelDims& dims, const ClusterModel& cluster,
    const SearchConstraints& constraints = {}, const BalancedLoad& load = {});

}  // namespace foldsim

#endif  // FOLDSIM_COSTMODEL_H_
