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

#include "foldsim/dispatcher.h"

#include <algorithm>
#include <numeric>
#include <string>
#include <tuple>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

VarBuffer ToBuffer(const Matrix& m, std::vector<std::size_t> counts) {
  VarBuffer b;
  b.row_width = static_cast<std::size_t>(m.cols());
  b.values.assign(m.data(), m.data() + m.size());
  b.counts = std::move(counts);
  return b;
}

Matrix ToMatrix(const std::vector<double>& values, std::size_t width) {
  const auto rows =
      static_cast<Eigen::Index>(width == 0 ? 0 : values.size() / width);
  Matrix m(rows, static_cast<Eigen::Index>(width));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

Matrix GatherRows(const Matrix& src, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) =
        src.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

// out[rows[i]] = src[i]
void ScatterRows(const Matrix& src, std::span<const std::size_t> rows,
                 Matrix& out) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(rows[i])) =
        src.row(static_cast<Eigen::Index>(i));
  }
}

// Inverse of GatherRows(src, landed_from_recv): landed order -> recv order.
Matrix LandedToRecv(const Matrix& landed,
                    std::span<const std::size_t> landed_from_recv) {
  Matrix out(landed.rows(), landed.cols());
  ScatterRows(landed, landed_from_recv, out);
  return out;
}

std::size_t Sum(std::span<const std::size_t> v) {
  return std::accumulate(v.begin(), v.end(), std::size_t{0});
}

}  // namespace

std::vector<std::size_t> DispatchPlan::PeerSendRows() const {
  std::vector<std::size_t> rows;
  for (const auto& per_expert : send_counts) rows.push_back(Sum(per_expert));
  return rows;
}

std::vector<std::size_t> DispatchPlan::PeerRecvRows() const {
  std::vector<std::size_t> rows;
  for (const auto& per_expert : recv_counts) rows.push_back(Sum(per_expert));
  return rows;
}

DispatchPlan BuildDispatchPlan(const RoutingDecision& decision, int ep_size,
                               int local_experts) {
  if (ep_size < 1 || local_experts < 1) {
    throw ValidationError("ep_size and local_experts must be >= 1");
  }
  const int num_experts = ep_size * local_experts;
  if (decision.num_experts != num_experts) {
    throw ValidationError(
        "decision has " + std::to_string(decision.num_experts) +
        " experts but ep_size*local_experts=" + std::to_string(num_experts));
  }
  DispatchPlan plan;
  plan.ep_size = ep_size;
  plan.local_experts = local_experts;
  plan.num_tokens = decision.tokens.size();
  plan.send_counts.assign(ep_size, std::vector<std::size_t>(local_experts, 0));
  plan.recv_counts.assign(ep_size, std::vector<std::size_t>(local_experts, 0));

  std::vector<std::tuple<int, std::size_t, std::size_t>> pairs;
  for (std::size_t t = 0; t < decision.tokens.size(); ++t) {
    const auto& choices = decision.tokens[t].choices;
    for (std::size_t c = 0; c < choices.size(); ++c) {
      const int e = choices[c].expert;
      if (e < 0 || e >= num_experts) {
        throw ValidationError("expert id " + std::to_string(e) +
                              " >= num_experts " + std::to_string(num_experts));
      }
      if (choices[c].kept) pairs.emplace_back(e, t, c);
    }
  }
  // Expert ids are contiguous per EP rank, so sorting by expert id orders by
  // (destination rank, local expert).
  std::stable_sort(pairs.begin(), pairs.end());
  for (const auto& [e, t, c] : pairs) {
    plan.source_token.push_back(t);
    plan.source_choice.push_back(c);
    plan.expert.push_back(e);
    plan.gates.push_back(decision.tokens[t].choices[c].gate);
    ++plan.send_counts[e / local_experts][e % local_experts];
  }
  return plan;
}

Matrix Permute(const Matrix& block, const DispatchPlan& plan) {
  if (static_cast<std::size_t>(block.rows()) != plan.num_tokens) {
    throw ValidationError("block has " + std::to_string(block.rows()) +
                          " rows but plan covers " +
                          std::to_string(plan.num_tokens) + " tokens");
  }
  return GatherRows(block, plan.source_token);
}

Matrix UnpermuteSum(const Matrix& rows, const DispatchPlan& plan) {
  if (static_cast<std::size_t>(rows.rows()) != plan.kept_pairs()) {
    throw ValidationError("expected " + std::to_string(plan.kept_pairs()) +
                          " permuted rows, got " + std::to_string(rows.rows()));
  }
  Matrix out =
      Matrix::Zero(static_cast<Eigen::Index>(plan.num_tokens), rows.cols());
  for (std::size_t p = 0; p < plan.kept_pairs(); ++p) {
    if (plan.source_token[p] >= plan.num_tokens) {
      throw ValidationError("plan row " + std::to_string(p) +
                            " points past the last token");
    }
    out.row(static_cast<Eigen::Index>(plan.source_token[p])) +=
        rows.row(static_cast<Eigen::Index>(p));
  }
  return out;
}

Matrix UnpermuteCombine(const Matrix& expert_out, const DispatchPlan& plan) {
  if (static_cast<std::size_t>(expert_out.rows()) != plan.kept_pairs()) {
    throw ValidationError("expected " + std::to_string(plan.kept_pairs()) +
                          " expert rows, got " +
                          std::to_string(expert_out.rows()));
  }
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(plan.num_tokens),
                            expert_out.cols());
  for (std::size_t p = 0; p < plan.kept_pairs(); ++p) {
    if (plan.source_token[p] >= plan.num_tokens) {
      throw ValidationError("plan row " + std::to_string(p) +
                            " points past the last token");
    }
    out.row(static_cast<Eigen::Index>(plan.source_token[p])) +=
        plan.gates[p] * expert_out.row(static_cast<Eigen::Index>(p));
  }
  return out;
}

MoeLayer DistributeMoeLayer(GatingParams gating, const ExpertParams& experts,
                            const ParallelTopology& topology) {
  topology.Validate();
  gating.Validate();
  const int num_experts = experts.num_experts();
  if (gating.num_experts() != num_experts) {
    throw ValidationError("router has " + std::to_string(gating.num_experts()) +
                          " experts but " + std::to_string(num_experts) +
                          " expert FFNs were given");
  }
  if (num_experts % topology.ep != 0) {
    throw ValidationError(
        "num_experts=" + std::to_string(num_experts) +
        " is not divisible by ep=" + std::to_string(topology.ep));
  }
  const int local = num_experts / topology.ep;
  MoeLayer layer;
  layer.gating = std::move(gating);
  for (int r = 0; r < topology.world_size; ++r) {
    const MoeCoord c = MoeCoordOf(topology, r);
    layer.rank_experts.push_back(
        ShardExperts(experts, c.ep * local, local, c.etp, topology.etp));
  }
  return layer;
}

MoeForwardResult MoeForward(SimWorld& world, std::span<const TokenBlock> inputs,
                            const MoeLayer& layer,
                            const ParallelTopology& topology) {
  topology.Validate();
  if (topology.pp != 1) {
    throw ValidationError("numeric MoE execution needs pp=1 (got pp=" +
                          std::to_string(topology.pp) + ")");
  }
  const int n = topology.world_size;
  if (world.n_ranks() != n || static_cast<int>(inputs.size()) != n ||
      static_cast<int>(layer.rank_experts.size()) != n) {
    throw ValidationError("world, inputs and expert shards must all cover " +
                          std::to_string(n) + " ranks");
  }
  const GatingParams& gating = layer.gating;
  gating.Validate();
  const int num_experts = gating.num_experts();
  if (num_experts % topology.ep != 0) {
    throw ValidationError(
        "num_experts=" + std::to_string(num_experts) +
        " is not divisible by ep=" + std::to_string(topology.ep));
  }
  const int local = num_experts / topology.ep;
  const auto hidden = static_cast<std::size_t>(gating.hidden());
  for (int r = 0; r < n; ++r) {
    if (static_cast<std::size_t>(inputs[r].values.cols()) != hidden) {
      throw ValidationError("rank " + std::to_string(r) + " input width " +
                            std::to_string(inputs[r].values.cols()) +
                            " != hidden " + std::to_string(hidden));
    }
  }

  MoeForwardResult result;
  MoeContext& ctx = result.context;
  ctx.topology = topology;
  ctx.groups = GenerateParallelGroups(topology);
  ctx.layer = layer;
  ctx.ranks.resize(n);
  const bool drop = !gating.dropless();
  const bool full_sequence =
      drop && gating.drop_mode == DropMode::kFullSequence;

  // Routing.
  world.ForEachRank([&](int r) {
    RankMoeState& rs = ctx.ranks[r];
    rs.input = inputs[r].values;
    rs.decision = ComputeGates(rs.input, inputs[r].positions, gating);
    if (drop && !full_sequence) {
      rs.decision = ApplyCapacity(std::move(rs.decision),
                                  rs.decision.tokens.size(), gating);
    }
  });
  if (full_sequence) {
    for (const RankGroup& g : SequenceGroups(topology)) {
      std::vector<RoutingDecision> local_decisions;
      for (int r : g) local_decisions.push_back(ctx.ranks[r].decision);
      std::vector<RoutingDecision> merged =
          GatherFullSequenceDecision(world, g, local_decisions, gating);
      for (std::size_t m = 0; m < g.size(); ++m) {
        ctx.ranks[g[m]].decision = std::move(merged[m]);
      }
    }
  }

  // Permutation.
  std::vector<Matrix> permuted(n);
  world.ForEachRank([&](int r) {
    RankMoeState& rs = ctx.ranks[r];
    rs.plan = BuildDispatchPlan(rs.decision, topology.ep, local);
    permuted[r] = Permute(rs.input, rs.plan);
  });

  // Token dispatch over EP. Per-expert counts travel first so receivers can
  // split each sender's segment by expert.
  std::vector<VarBuffer> received(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEp)) {
    std::vector<VarBuffer> count_send, token_send;
    for (int r : g) {
      const DispatchPlan& plan = ctx.ranks[r].plan;
      VarBuffer counts;
      counts.row_width = static_cast<std::size_t>(local);
      counts.counts.assign(g.size(), 1);
      for (const auto& per_expert : plan.send_counts) {
        for (std::size_t c : per_expert) {
          counts.values.push_back(static_cast<double>(c));
        }
      }
      count_send.push_back(std::move(counts));
      token_send.push_back(ToBuffer(permuted[r], plan.PeerSendRows()));
    }
    const std::vector<VarBuffer> count_recv =
        AllToAllV(world, g, count_send, "dispatch_counts");
    std::vector<VarBuffer> token_recv =
        AllToAllV(world, g, token_send, "dispatch");
    for (std::size_t m = 0; m < g.size(); ++m) {
      DispatchPlan& plan = ctx.ranks[g[m]].plan;
      for (std::size_t j = 0; j < g.size(); ++j) {
        for (int le = 0; le < local; ++le) {
          plan.recv_counts[j][le] =
              static_cast<std::size_t>(count_recv[m].values[j * local + le]);
        }
        if (Sum(plan.recv_counts[j]) != token_recv[m].counts[j]) {
          throw InvariantError("dispatch counts disagree with token rows");
        }
      }
      received[g[m]] = std::move(token_recv[m]);
    }
  }

  // Regroup received rows by local expert.
  std::vector<Matrix> landed(n);
  world.ForEachRank([&](int r) {
    RankMoeState& rs = ctx.ranks[r];
    const DispatchPlan& plan = rs.plan;
    std::vector<std::size_t> sender_start(plan.ep_size, 0);
    for (int j = 1; j < plan.ep_size; ++j) {
      sender_start[j] = sender_start[j - 1] + Sum(plan.recv_counts[j - 1]);
    }
    rs.landed_expert_counts.assign(local, 0);
    for (int le = 0; le < local; ++le) {
      for (int j = 0; j < plan.ep_size; ++j) {
        std::size_t start = sender_start[j];
        for (int l = 0; l < le; ++l) start += plan.recv_counts[j][l];
        for (std::size_t i = 0; i < plan.recv_counts[j][le]; ++i) {
          rs.landed_from_recv.push_back(start + i);
        }
        rs.landed_expert_counts[le] += plan.recv_counts[j][le];
      }
    }
    landed[r] =
        GatherRows(ToMatrix(received[r].values, hidden), rs.landed_from_recv);
  });

  // ETP gather so every shard sees the same tokens.
  std::vector<Matrix> gathered(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEtp)) {
    std::vector<VarBuffer> count_send, token_send;
    for (int r : g) {
      std::vector<double> counts;
      for (std::size_t c : ctx.ranks[r].landed_expert_counts) {
        counts.push_back(static_cast<double>(c));
      }
      count_send.push_back(
          VarBuffer::Dense(std::move(counts), static_cast<std::size_t>(local)));
      token_send.push_back(ToBuffer(landed[r], {}));
      token_send.back().counts = {static_cast<std::size_t>(landed[r].rows())};
    }
    const auto count_recv = AllGatherV(world, g, count_send, "etp_counts");
    const auto token_recv = AllGatherV(world, g, token_send, "etp_gather");
    for (std::size_t m = 0; m < g.size(); ++m) {
      RankMoeState& rs = ctx.ranks[g[m]];
      rs.member_offsets = token_recv[m].offsets;
      rs.gathered_rows = token_recv[m].buffer.rows();
      rs.member_expert_counts.assign(g.size(), {});
      for (std::size_t k = 0; k < g.size(); ++k) {
        for (int le = 0; le < local; ++le) {
          rs.member_expert_counts[k].push_back(static_cast<std::size_t>(
              count_recv[m].buffer.values[k * local + le]));
        }
      }
      gathered[g[m]] = ToMatrix(token_recv[m].buffer.values, hidden);
    }
  }

  // Expert shards.
  std::vector<Matrix> partial(n);
  world.ForEachRank([&](int r) {
    RankMoeState& rs = ctx.ranks[r];
    const ExpertWeights& weights = layer.rank_experts[r];
    const int first = MoeCoordOf(topology, r).ep * local;
    rs.expert_rows.assign(local, {});
    rs.expert_acts.assign(local, {});
    for (std::size_t m = 0; m < rs.member_offsets.size(); ++m) {
      std::size_t start = rs.member_offsets[m];
      for (int le = 0; le < local; ++le) {
        for (std::size_t i = 0; i < rs.member_expert_counts[m][le]; ++i) {
          rs.expert_rows[le].push_back(start + i);
        }
        start += rs.member_expert_counts[m][le];
      }
    }
    partial[r] = Matrix::Zero(static_cast<Eigen::Index>(rs.gathered_rows),
                              static_cast<Eigen::Index>(hidden));
    for (int le = 0; le < local; ++le) {
      const Matrix x = GatherRows(gathered[r], rs.expert_rows[le]);
      const Matrix y =
          ExpertForwardShard(x, weights, first + le, &rs.expert_acts[le]);
      ScatterRows(y, rs.expert_rows[le], partial[r]);
    }
  });

  // ETP reduce-scatter back to each member's landed rows.
  std::vector<Matrix> reduced(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEtp)) {
    std::vector<VarBuffer> send;
    std::vector<std::size_t> partitions;
    const RankMoeState& first = ctx.ranks[g[0]];
    for (std::size_t m = 0; m < g.size(); ++m) {
      send.push_back(ToBuffer(partial[g[m]], {}));
      partitions.push_back(Sum(first.member_expert_counts[m]));
    }
    const auto out = ReduceScatterV(world, g, send, partitions, "etp_scatter");
    for (std::size_t m = 0; m < g.size(); ++m) {
      reduced[g[m]] = ToMatrix(out[m].values, hidden);
    }
  }

  // Return trip over EP; rows come back in plan order.
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEp)) {
    std::vector<VarBuffer> send;
    for (int r : g) {
      const RankMoeState& rs = ctx.ranks[r];
      send.push_back(ToBuffer(LandedToRecv(reduced[r], rs.landed_from_recv),
                              rs.plan.PeerRecvRows()));
    }
    const auto back = AllToAllV(world, g, send, "combine");
    for (std::size_t m = 0; m < g.size(); ++m) {
      RankMoeState& rs = ctx.ranks[g[m]];
      rs.returned = ToMatrix(back[m].values, hidden);
      if (static_cast<std::size_t>(rs.returned.rows()) !=
          rs.plan.kept_pairs()) {
        throw InvariantError("rank " + std::to_string(g[m]) + " sent " +
                             std::to_string(rs.plan.kept_pairs()) +
                             " pairs but got " +
                             std::to_string(rs.returned.rows()) + " back");
      }
    }
  }

  result.outputs.resize(n);
  world.ForEachRank([&](int r) {
    TokenBlock& out = result.outputs[r];
    out.rank = r;
    out.positions = inputs[r].positions;
    out.values = UnpermuteCombine(ctx.ranks[r].returned, ctx.ranks[r].plan);
  });
  return result;
}

std::vector<RankGradients> MoeBackward(SimWorld& world,
                                       std::span<const Matrix> upstream,
                                       const MoeContext& ctx) {
  const int n = ctx.topology.world_size;
  if (static_cast<int>(upstream.size()) != n || world.n_ranks() != n) {
    throw ValidationError("backward needs one upstream block per rank");
  }
  const GatingParams& gating = ctx.layer.gating;
  const auto hidden = static_cast<std::size_t>(gating.hidden());
  const int local = gating.num_experts() / ctx.topology.ep;

  std::vector<RankGradients> grads(n);
  std::vector<Matrix> pair_grads(n);
  std::vector<std::vector<std::vector<double>>> gate_grads(n);
  world.ForEachRank([&](int r) {
    const RankMoeState& rs = ctx.ranks[r];
    const Matrix& dy = upstream[r];
    if (dy.rows() != rs.input.rows() ||
        static_cast<std::size_t>(dy.cols()) != hidden) {
      throw ValidationError("rank " + std::to_string(r) +
                            " upstream gradient shape does not match its "
                            "forward output");
    }
    const DispatchPlan& plan = rs.plan;
    gate_grads[r].assign(rs.decision.tokens.size(), {});
    for (std::size_t t = 0; t < rs.decision.tokens.size(); ++t) {
      gate_grads[r][t].assign(rs.decision.tokens[t].choices.size(), 0.0);
    }
    pair_grads[r].resize(static_cast<Eigen::Index>(plan.kept_pairs()),
                         static_cast<Eigen::Index>(hidden));
    for (std::size_t p = 0; p < plan.kept_pairs(); ++p) {
      const auto t = static_cast<Eigen::Index>(plan.source_token[p]);
      const auto row = static_cast<Eigen::Index>(p);
      pair_grads[r].row(row) = plan.gates[p] * dy.row(t);
      gate_grads[r][plan.source_token[p]][plan.source_choice[p]] =
          dy.row(t).dot(rs.returned.row(row));
    }
  });

  // Gradients retrace the combine a2a.
  std::vector<Matrix> landed(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEp)) {
    std::vector<VarBuffer> send;
    for (int r : g) {
      send.push_back(ToBuffer(pair_grads[r], ctx.ranks[r].plan.PeerSendRows()));
    }
    const auto recv = AllToAllV(world, g, send, "grad_dispatch");
    for (std::size_t m = 0; m < g.size(); ++m) {
      const RankMoeState& rs = ctx.ranks[g[m]];
      landed[g[m]] =
          GatherRows(ToMatrix(recv[m].values, hidden), rs.landed_from_recv);
    }
  }

  // Backward of the reduce-scatter is a gather.
  std::vector<Matrix> gathered(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEtp)) {
    std::vector<VarBuffer> send;
    for (int r : g) {
      send.push_back(ToBuffer(landed[r], {}));
      send.back().counts = {static_cast<std::size_t>(landed[r].rows())};
    }
    const auto recv = AllGatherV(world, g, send, "grad_etp_gather");
    for (std::size_t m = 0; m < g.size(); ++m) {
      gathered[g[m]] = ToMatrix(recv[m].buffer.values, hidden);
    }
  }

  std::vector<Matrix> partial(n);
  world.ForEachRank([&](int r) {
    const RankMoeState& rs = ctx.ranks[r];
    const ExpertWeights& weights = ctx.layer.rank_experts[r];
    const int first = MoeCoordOf(ctx.topology, r).ep * local;
    partial[r] = Matrix::Zero(static_cast<Eigen::Index>(rs.gathered_rows),
                              static_cast<Eigen::Index>(hidden));
    grads[r].d_w1.resize(local);
    grads[r].d_w2.resize(local);
    for (int le = 0; le < local; ++le) {
      const Matrix dy = GatherRows(gathered[r], rs.expert_rows[le]);
      ExpertShardGrads g =
          ExpertBackwardShard(dy, rs.expert_acts[le], weights, first + le);
      ScatterRows(g.d_input, rs.expert_rows[le], partial[r]);
      grads[r].d_w1[le] = std::move(g.d_w1);
      grads[r].d_w2[le] = std::move(g.d_w2);
    }
  });

  // Backward of the gather is a reduce-scatter.
  std::vector<Matrix> reduced(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEtp)) {
    std::vector<VarBuffer> send;
    std::vector<std::size_t> partitions;
    const RankMoeState& first = ctx.ranks[g[0]];
    for (std::size_t m = 0; m < g.size(); ++m) {
      send.push_back(ToBuffer(partial[g[m]], {}));
      partitions.push_back(Sum(first.member_expert_counts[m]));
    }
    const auto out =
        ReduceScatterV(world, g, send, partitions, "grad_etp_scatter");
    for (std::size_t m = 0; m < g.size(); ++m) {
      reduced[g[m]] = ToMatrix(out[m].values, hidden);
    }
  }

  std::vector<Matrix> returned(n);
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEp)) {
    std::vector<VarBuffer> send;
    for (int r : g) {
      const RankMoeState& rs = ctx.ranks[r];
      send.push_back(ToBuffer(LandedToRecv(reduced[r], rs.landed_from_recv),
                              rs.plan.PeerRecvRows()));
    }
    const auto back = AllToAllV(world, g, send, "grad_combine");
    for (std::size_t m = 0; m < g.size(); ++m) {
      returned[g[m]] = ToMatrix(back[m].values, hidden);
    }
  }

  world.ForEachRank([&](int r) {
    const RankMoeState& rs = ctx.ranks[r];
    const Matrix d_logits =
        GateLogitGradient(rs.decision, gating, gate_grads[r]);
    grads[r].d_input = UnpermuteSum(returned[r], rs.plan) +
                       d_logits * gating.gate_weights.transpose();
    grads[r].d_gate_weights = rs.input.transpose() * d_logits;
  });
  return grads;
}

void ReduceWeightGradients(SimWorld& world, const MoeContext& ctx,
                           std::vector<RankGradients>& grads) {
  const int n = ctx.topology.world_size;
  if (static_cast<int>(grads.size()) != n) {
    throw ValidationError("need gradients for every rank");
  }
  for (const RankGroup& g : ctx.groups.Moe(ParallelDim::kEdp)) {
    std::vector<std::vector<double>> flat;
    for (int r : g) {
      std::vector<double> v;
      for (std::size_t le = 0; le < grads[r].d_w1.size(); ++le) {
        const Matrix& a = grads[r].d_w1[le];
        const Matrix& b = grads[r].d_w2[le];
        v.insert(v.end(), a.data(), a.data() + a.size());
        v.insert(v.end(), b.data(), b.data() + b.size());
      }
      flat.push_back(std::move(v));
    }
    const auto summed =
        AllReduce(world, g, flat, ReduceOp::kSum, "grad_allreduce_expert");
    for (std::size_t m = 0; m < g.size(); ++m) {
      RankGradients& rg = grads[g[m]];
      const double* src = summed[m].data();
      for (std::size_t le = 0; le < rg.d_w1.size(); ++le) {
        std::copy(src, src + rg.d_w1[le].size(), rg.d_w1[le].data());
        src += rg.d_w1[le].size();
        std::copy(src, src + rg.d_w2[le].size(), rg.d_w2[le].data());
        src += rg.d_w2[le].size();
      }
    }
  }

  RankGroup everyone(n);
  std::iota(everyone.begin(), everyone.end(), 0);
  std::vector<std::vector<double>> flat;
  for (int r = 0; r < n; ++r) {
    const Matrix& m = grads[r].d_gate_weights;
    flat.emplace_back(m.data(), m.data() + m.size());
  }
  const auto summed =
      AllReduce(world, everyone, flat, ReduceOp::kSum, "grad_allreduce_router");
  for (int r = 0; r < n; ++r) {
    std::copy(summed[r].begin(), summed[r].end(),
              grads[r].d_gate_weights.data());
  }
}

}  // namespace foldsim
