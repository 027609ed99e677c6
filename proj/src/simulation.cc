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

#include "foldsim/simulation.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

Matrix SelectRows(const Matrix& m, const std::vector<std::int64_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

Matrix Stack(const std::vector<Matrix>& blocks) {
  Eigen::Index rows = 0;
  for (const Matrix& b : blocks) rows += b.rows();
  Matrix out(rows, blocks.empty() ? 0 : blocks.front().cols());
  Eigen::Index at = 0;
  for (const Matrix& b : blocks) {
    out.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

bool SameRoutes(const TokenRoute& route, const std::vector<OracleRoute>& ref) {
  if (route.choices.size() != ref.size()) return false;
  for (std::size_t c = 0; c < ref.size(); ++c) {
    if (route.choices[c].expert != ref[c].expert ||
        route.choices[c].kept != ref[c].kept) {
      return false;
    }
  }
  return true;
}

void CheckSimulatable(const SimulationSpec& spec) {
  spec.topology.Validate();
  spec.dims.Validate();
  spec.cluster.Validate();
  const ParallelTopology& t = spec.topology;
  const ModelDims& d = spec.dims;
  if (t.pp != 1) {
    throw ValidationError("simulate needs pp=1, got pp=" +
                          std::to_string(t.pp));
  }
  if (d.seq_len % (t.tp * t.cp) != 0) {
    throw ValidationError(
        "seq_len=" + std::to_string(d.seq_len) +
        " is not divisible by tp*cp=" + std::to_string(t.tp * t.cp));
  }
  if (d.batch % t.dp != 0) {
    throw ValidationError("batch=" + std::to_string(d.batch) +
                          " is not divisible by dp=" + std::to_string(t.dp));
  }
  if (d.num_experts % t.ep != 0) {
    throw ValidationError("num_experts=" + std::to_string(d.num_experts) +
                          " is not divisible by ep=" + std::to_string(t.ep));
  }
  if (d.ffn % t.etp != 0) {
    throw ValidationError("ffn=" + std::to_string(d.ffn) +
                          " is not divisible by etp=" + std::to_string(t.etp));
  }
  if (spec.workers < 1) throw ValidationError("workers must be >= 1");
  if (spec.grad_check && !spec.backward) {
    throw ValidationError("grad_check needs backward");
  }
  if (!(spec.fd_eps > 0.0)) throw ValidationError("fd_eps must be > 0");
}

}  // namespace

double GradCheck::worst() const {
  return std::max({input, gate_weights, w1, w2});
}

std::vector<std::int64_t> RankRows(const ParallelTopology& topology,
                                   const ModelDims& dims, int rank) {
  const auto coord = AttentionCoordOf(topology, rank);
  const int shards = topology.tp * topology.cp;
  const int shard_len = dims.seq_len / shards;
  const int per_dp = dims.batch / topology.dp;
  const int shard = coord.cp * topology.tp + coord.tp;
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(per_dp) * shard_len);
  for (int s = coord.dp * per_dp; s < (coord.dp + 1) * per_dp; ++s) {
    for (int p = 0; p < shard_len; ++p) {
      rows.push_back(static_cast<std::int64_t>(s) * dims.seq_len +
                     static_cast<std::int64_t>(shard) * shard_len + p);
    }
  }
  return rows;
}

CapacityScopes OracleScopes(const ParallelTopology& topology,
                            const ModelDims& dims, const RouterConfig& router) {
  CapacityScopes scopes;
  if (!router.capacity_factor) return scopes;
  if (router.drop_mode == DropMode::kSubSequence) {
    for (int r = 0; r < topology.world_size; ++r) {
      const auto rows = RankRows(topology, dims, r);
      scopes.emplace_back(rows.begin(), rows.end());
    }
    return scopes;
  }
  for (const RankGroup& g : SequenceGroups(topology)) {
    if (AttentionCoordOf(topology, g.front()).pp != 0) continue;
    std::vector<std::size_t> scope;
    for (int r : g) {
      const auto rows = RankRows(topology, dims, r);
      scope.insert(scope.end(), rows.begin(), rows.end());
    }
    std::sort(scope.begin(), scope.end());
    scopes.push_back(std::move(scope));
  }
  return scopes;
}

double MaxRelativeErrorSkippingNan(const Matrix& actual,
                                   const Matrix& expected) {
  if (actual.rows() != expected.rows() || actual.cols() != expected.cols()) {
    throw InvariantError("shape mismatch in gradient comparison");
  }
  double diff = 0.0;
  double scale = 0.0;
  for (Eigen::Index i = 0; i < expected.size(); ++i) {
    const double b = expected.data()[i];
    if (std::isnan(b)) continue;
    diff = std::max(diff, std::abs(actual.data()[i] - b));
    scale = std::max(scale, std::abs(b));
  }
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

SimulationResult RunSimulation(const SimulationSpec& spec) {
  CheckSimulatable(spec);
  const ParallelTopology& topo = spec.topology;
  const ModelDims& dims = spec.dims;
  const int n = topo.world_size;
  const Eigen::Index total_rows =
      static_cast<Eigen::Index>(dims.batch) * dims.seq_len;

  SimulationResult result;
  auto token_engine = MakeEngine(spec.seed, RandomStream::kTokens);
  result.x = UniformMatrix(token_engine, total_rows, dims.hidden, -1.0, 1.0);

  GatingParams gating;
  gating.gate_weights =
      InitGateWeights(dims.hidden, dims.num_experts, spec.seed);
  gating.top_k = dims.top_k;
  gating.gate_fn = spec.router.gate_fn;
  gating.renormalize_topk = spec.router.renormalize_topk;
  gating.capacity_factor = spec.router.capacity_factor;
  gating.drop_mode = spec.router.drop_mode;
  gating.drop_priority = spec.router.drop_priority;
  gating.Validate();
  const ExpertParams experts = InitExpertParams(
      dims.num_experts, dims.hidden, dims.ffn, spec.seed, spec.activation);
  const MoeLayer layer = DistributeMoeLayer(gating, experts, topo);

  std::vector<std::vector<std::int64_t>> rank_rows(n);
  std::vector<TokenBlock> inputs(n);
  for (int r = 0; r < n; ++r) {
    rank_rows[r] = RankRows(topo, dims, r);
    inputs[r].rank = r;
    inputs[r].values = SelectRows(result.x, rank_rows[r]);
    inputs[r].positions = rank_rows[r];
  }

  SimWorld world(n, spec.workers, dims.elem_bytes);
  MoeForwardResult fwd = MoeForward(world, inputs, layer, topo);

  result.scopes = OracleScopes(topo, dims, spec.router);
  const OracleModel model = OracleModel::From(gating, experts);
  const OracleOutput ref = OracleMoeForward(result.x, model, result.scopes);
  result.y_oracle = ref.y;
  result.y = Matrix::Zero(total_rows, dims.hidden);
  for (int r = 0; r < n; ++r) {
    const RoutingDecision& decision = fwd.context.ranks[r].decision;
    for (std::size_t i = 0; i < rank_rows[r].size(); ++i) {
      const std::int64_t row = rank_rows[r][i];
      result.y.row(row) =
          fwd.outputs[r].values.row(static_cast<Eigen::Index>(i));
      const TokenRoute& route = decision.tokens[i];
      if (!SameRoutes(route, ref.routes[row])) result.kept_sets_match = false;
      for (const ExpertChoice& c : route.choices) {
        ++(c.kept ? result.kept_pairs : result.dropped_pairs);
      }
    }
  }
  result.max_rel_error = MaxRelativeError(result.y, result.y_oracle);

  // Scores are row-wise, so scoring the whole batch at once reproduces each
  // rank's scores; the choices come from the ranks to keep their drop flags.
  std::vector<std::int64_t> all_rows(static_cast<std::size_t>(total_rows));
  for (std::size_t i = 0; i < all_rows.size(); ++i) {
    all_rows[i] = static_cast<std::int64_t>(i);
  }
  RoutingDecision global = ComputeGates(result.x, all_rows, gating);
  for (int r = 0; r < n; ++r) {
    const RoutingDecision& decision = fwd.context.ranks[r].decision;
    for (std::size_t i = 0; i < rank_rows[r].size(); ++i) {
      global.tokens[rank_rows[r][i]] = decision.tokens[i];
    }
  }
  result.load = ComputeLoadStats(global, dims.num_experts);

  result.plan_load.route_gather =
      spec.router.capacity_factor.has_value() &&
      spec.router.drop_mode == DropMode::kFullSequence;
  result.plan_load.include_backward = spec.backward;
  for (int r = 0; r < n; ++r) {
    result.plan_load.plans.push_back(fwd.context.ranks[r].plan);
    result.plan_load.local_tokens.push_back(rank_rows[r].size());
  }

  if (spec.backward) {
    auto up_engine = MakeEngine(spec.seed, RandomStream::kUpstream);
    const Matrix upstream =
        UniformMatrix(up_engine, total_rows, dims.hidden, -1.0, 1.0);
    std::vector<Matrix> rank_upstream(n);
    for (int r = 0; r < n; ++r) {
      rank_upstream[r] = SelectRows(upstream, rank_rows[r]);
    }
    std::vector<RankGradients> grads =
        MoeBackward(world, rank_upstream, fwd.context);
    ReduceWeightGradients(world, fwd.context, grads);

    result.d_input = Matrix::Zero(total_rows, dims.hidden);
    for (int r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < rank_rows[r].size(); ++i) {
        result.d_input.row(rank_rows[r][i]) =
            grads[r].d_input.row(static_cast<Eigen::Index>(i));
      }
    }
    result.d_gate_weights = grads[0].d_gate_weights;
    result.d_w1.assign(dims.num_experts, Matrix::Zero(dims.hidden, dims.ffn));
    result.d_w2.assign(dims.num_experts, Matrix::Zero(dims.ffn, dims.hidden));
    const Eigen::Index shard = dims.ffn / topo.etp;
    // EDP replicas hold identical reduced gradients, so the first writer of
    // each slice is as good as any other.
    for (int r = 0; r < n; ++r) {
      if (MoeCoordOf(topo, r).edp != 0) continue;
      const ExpertWeights& held = layer.rank_experts[r];
      for (std::size_t j = 0; j < held.experts.size(); ++j) {
        const int e = held.experts[j].expert;
        const Eigen::Index col = held.etp_rank * shard;
        result.d_w1[e].middleCols(col, shard) = grads[r].d_w1[j];
        result.d_w2[e].middleRows(col, shard) = grads[r].d_w2[j];
      }
    }

    if (spec.grad_check) {
      const FdGradients fd =
          OracleGradFd(result.x, model, upstream, spec.fd_eps, result.scopes);
      GradCheck check;
      check.input = MaxRelativeErrorSkippingNan(result.d_input, fd.d_input);
      check.gate_weights =
          MaxRelativeErrorSkippingNan(result.d_gate_weights, fd.d_gate_weights);
      // Expert gradients share one scale so a lightly loaded expert does not
      // amplify finite-difference round-off.
      check.w1 =
          MaxRelativeErrorSkippingNan(Stack(result.d_w1), Stack(fd.d_w1));
      check.w2 =
          MaxRelativeErrorSkippingNan(Stack(result.d_w2), Stack(fd.d_w2));
      check.unstable_probes = fd.unstable_probes;
      result.grad_check = check;
    }
  }

  result.ledger = world.ledger();
  result.traffic = ComputeTrafficStats(world, spec.cluster);
  return result;
}

}  // namespace foldsim
