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

#ifndef FOLDSIM_ORACLE_H_
#define FOLDSIM_ORACLE_H_

#include <cstddef>
#include <optional>
#include <vector>

#include "foldsim/experts.h"
#include "foldsim/router.h"
#include "foldsim/tensor.h"

namespace foldsim {

// Single-device reference for the whole MoE layer. Shares no code path with
// the router, dispatcher, or collectives.
struct OracleModel {
  Matrix gate_weights;   // [hidden x E]
  ExpertParams experts;  // unsharded
  int top_k = 1;
  GateFn gate_fn = GateFn::kSoftmax;
  bool renormalize_topk = false;
  std::optional<double> capacity_factor;
  DropPriority drop_priority = DropPriority::kPosition;

  static OracleModel From(const GatingParams& gating,
                          const ExpertParams& experts);
};

// Row-index sets over which capacity is applied independently. Row index is
// the token's sequence position. Empty means one scope holding every row.
using CapacityScopes = std::vector<std::vector<std::size_t>>;

struct OracleRoute {
  int expert = 0;
  double gate = 0.0;
  bool kept = true;
};

struct OracleOutput {
  Matrix y;
  std::vector<std::vector<OracleRoute>> routes;  // per row, top-k order
};

// y_i = sum over kept choices of gate * f_e(x_i).
OracleOutput OracleMoeForward(const Matrix& x, const OracleModel& model,
                              const CapacityScopes& scopes = {});

// Central differences of sum(<upstream, y>) w.r.t. every input, router and
// expert weight. A probe whose +/- eps evaluation changes the routing, a drop
// flag, or a ReLU activation pattern is unstable: its entry is NaN and it is
// counted in unstable_probes.
struct FdGradients {
  Matrix d_input;
  Matrix d_gate_weights;
  std::vector<Matrix> d_w1;
  std::vector<Matrix> d_w2;
  std::size_t unstable_probes = 0;
};

FdGradients OracleGradFd(const Matrix& x, const OracleModel& model,
                         const Matrix& upstream, double eps,
                         const CapacityScopes& scopes = {});

}  // namespace foldsim

#endif  // FOLDSIM_ORACLE_H_
