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

#ifndef FOLDSIM_SIMULATION_H_
#define FOLDSIM_SIMULATION_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "foldsim/collectives.h"
#include "foldsim/costmodel.h"
#include "foldsim/dispatcher.h"
#include "foldsim/experts.h"
#include "foldsim/oracle.h"
#include "foldsim/router.h"
#include "foldsim/tensor.h"
#include "foldsim/topology.h"

namespace foldsim {

// Router settings that are not model dimensions.
struct RouterConfig {
  GateFn gate_fn = GateFn::kSoftmax;
  bool renormalize_topk = false;
  std::optional<double> capacity_factor;  // unset means dropless
  DropMode drop_mode = DropMode::kSubSequence;
  DropPriority drop_priority = DropPriority::kPosition;
};

struct SimulationSpec {
  ParallelTopology topology;
  ModelDims dims;
  RouterConfig router;
  ClusterModel cluster;
  Activation activation = Activation::kRelu;
  std::uint64_t seed = 0;
  int workers = 1;
  bool backward = true;
  // Compare the distributed gradients with central differences of the oracle.
  bool grad_check = false;
  double fd_eps = 1e-5;
};

struct GradCheck {
  double input = 0.0;
  double gate_weights = 0.0;
  double w1 = 0.0;
  double w2 = 0.0;
  std::size_t unstable_probes = 0;

  double worst() const;
};

struct SimulationResult {
  Matrix x;  // [batch * seq_len x hidden], global row order
  Matrix y;  // distributed output reassembled in global row order
  Matrix y_oracle;
  double max_rel_error = 0.0;
  bool kept_sets_match = true;
  std::size_t kept_pairs = 0;
  std::size_t dropped_pairs = 0;
  LoadStats load;  // over every token, using the distributed drop flags
  CapacityScopes scopes;

  // Filled when backward is set.
  Matrix d_input;
  Matrix d_gate_weights;
  std::vector<Matrix> d_w1;  // full, per expert
  std::vector<Matrix> d_w2;
  std::optional<GradCheck> grad_check;

  std::vector<LedgerEntry> ledger;
  TrafficStats traffic;
  PlanLoad plan_load;  // feeds the plan-mode cost estimate
};

// Rows of the global [batch * seq_len x hidden] token matrix that rank
// `rank` holds: its data-parallel sequences, each cut into tp * cp equal
// shards with shard index cp_coord * tp + tp_coord.
std::vector<std::int64_t> RankRows(const ParallelTopology& topology,
                                   const ModelDims& dims, int rank);

// The oracle's capacity scopes matching the distributed drop mode.
CapacityScopes OracleScopes(const ParallelTopology& topology,
                            const ModelDims& dims, const RouterConfig& router);

// Seeded end to end run: shard inputs, MoE forward (and backward with weight
// gradient reduction), then compare against the dense oracle.
SimulationResult RunSimulation(const SimulationSpec& spec);

// max |a - b| / max |b| over entries where b is finite.
double MaxRelativeErrorSkippingNan(const Matrix& actual,
                                   const Matrix& expected);

}  // namespace foldsim

#endif  // FOLDSIM_SIMULATION_H_
