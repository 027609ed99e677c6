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

#include "foldsim/costmodel.h"

#include <algorithm>
#include <array>
#include <functional>
#include <numeric>
#include <tuple>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

using PerRankBytes = std::function<double(int rank)>;

double Bandwidth(Span span, const ClusterModel& cluster) {
  return span == Span::kIntra ? cluster.intra_bw : cluster.inter_bw;
}

// Groups whose ranks belong to pipeline stage 0.
std::vector<RankGroup> StageZero(const std::vector<RankGroup>& groups,
                                 const ParallelTopology& topology,
                                 bool moe_mesh) {
  std::vector<RankGroup> out;
  for (const RankGroup& g : groups) {
    const int rank = g.front();
    const int stage = moe_mesh ? MoeCoordOf(topology, rank).pp
                               : AttentionCoordOf(topology, rank).pp;
    if (stage == 0) out.push_back(g);
  }
  return out;
}

CommCost Aggregate(std::string name, Primitive primitive, std::string group,
                   const std::vector<RankGroup>& groups,
                   const PerRankBytes& per_rank, const ClusterModel& cluster) {
  CommCost c;
  c.name = std::move(name);
  c.primitive = primitive;
  c.group = std::move(group);
  std::size_t widest = 1;
  for (const RankGroup& g : groups) {
    const SpanInfo info = ClassifyGroupSpan(g, cluster);
    if (info.span == Span::kInter) c.span = Span::kInter;
    c.node_count = std::max(c.node_count, info.node_count);
    widest = std::max(widest, g.size());
    for (int r : g) {
      const double b = per_rank(r);
      (info.span == Span::kIntra ? c.bytes_intra : c.bytes_inter) += b;
      c.max_rank_bytes = std::max(c.max_rank_bytes, b);
    }
  }
  if (widest > 1) {
    c.time_s = c.max_rank_bytes / Bandwidth(c.span, cluster) +
               cluster.per_link_latency_s;
  }
  return c;
}

std::vector<RankGroup> StageGroups(const ParallelTopology& topology) {
  std::vector<RankGroup> stages(topology.pp);
  for (int r = 0; r < topology.world_size; ++r) {
    stages[AttentionCoordOf(topology, r).pp].push_back(r);
  }
  return stages;
}

// Row counts a simulation moves, derived from the dispatch plans alone.
struct PlanTraffic {
  std::vector<double> dispatch_rows;  // rows sent to other EP members
  std::vector<double> combine_rows;   // rows returned to other EP members
  std::vector<double> landed_rows;    // rows received over EP, incl. self
  std::vector<double> etp_rows;       // rows in the rank's ETP gather
};

PlanTraffic TraceLoad(const ParallelTopology& topology, const GroupSets& groups,
                      const PlanLoad& load) {
  const int n = topology.world_size;
  if (topology.pp != 1) {
    throw ValidationError("plan-mode costing needs pp=1");
  }
  if (static_cast<int>(load.plans.size()) != n ||
      static_cast<int>(load.local_tokens.size()) != n) {
    throw ValidationError(
        "plan-mode costing needs a plan and a token count "
        "for every rank");
  }
  PlanTraffic t;
  t.dispatch_rows.assign(n, 0.0);
  t.combine_rows.assign(n, 0.0);
  t.landed_rows.assign(n, 0.0);
  t.etp_rows.assign(n, 0.0);
  for (const RankGroup& g : groups.Moe(ParallelDim::kEp)) {
    for (std::size_t me = 0; me < g.size(); ++me) {
      const DispatchPlan& plan = load.plans[g[me]];
      if (plan.send_counts.size() != g.size()) {
        throw ValidationError("plan of rank " + std::to_string(g[me]) +
                              " does not match the EP group size");
      }
      for (std::size_t peer = 0; peer < g.size(); ++peer) {
        const auto& row = plan.send_counts[peer];
        const auto rows = static_cast<double>(
            std::accumulate(row.begin(), row.end(), std::size_t{0}));
        t.landed_rows[g[peer]] += rows;
        if (peer != me) {
          t.dispatch_rows[g[me]] += rows;
          t.combine_rows[g[peer]] += rows;
        }
      }
    }
  }
  for (const RankGroup& g : groups.Moe(ParallelDim::kEtp)) {
    double total = 0.0;
    for (int r : g) total += t.landed_rows[r];
    for (int r : g) t.etp_rows[r] = total;
  }
  return t;
}

constexpr std::array<const char*, 8> kFilterStages = {
    "degree divisibility of world_size",
    "ep <= num_experts and num_experts % ep == 0",
    "ffn % etp == 0",
    "seq_len % (tp*cp) == 0",
    "batch % dp == 0",
    "layers % pp == 0",
    "pp group consistency",
    "memory_limit_bytes",
};

struct FilterResult {
  std::vector<ParallelTopology> survivors;
  // Index into kFilterStages of the first stage that left nothing.
  int binding_stage = -1;
};

FilterResult FilterConfigs(int world_size, const ModelDims& dims,
                           const SearchConstraints& constraints) {
  std::array<int, kFilterStages.size()> passed{};
  FilterResult result;
  std::vector<int> divisors;
  for (int d = 1; d <= world_size; ++d) {
    if (world_size % d == 0) divisors.push_back(d);
  }
  for (int tp : divisors) {
    for (int cp : divisors) {
      for (int pp : divisors) {
        for (int ep : divisors) {
          for (int etp : divisors) {
            if (world_size % (tp * cp * pp) != 0 ||
                world_size % (ep * etp * pp) != 0) {
              continue;
            }
            ++passed[0];
            if (ep > dims.num_experts || dims.num_experts % ep != 0) continue;
            ++passed[1];
            if (dims.ffn % etp != 0) continue;
            ++passed[2];
            if (dims.seq_len % (tp * cp) != 0) continue;
            ++passed[3];
            const ParallelTopology t =
                ParallelTopology::Create(world_size, tp, cp, ep, etp, pp);
            if (dims.batch % t.dp != 0) continue;
            ++passed[4];
            if (dims.layers % pp != 0) continue;
            ++passed[5];
            if (!CheckPpConsistency(GenerateParallelGroups(t)).consistent) {
              continue;
            }
            ++passed[6];
            if (constraints.memory_limit_bytes &&
                EstimateMemoryBytes(t, dims) >
                    *constraints.memory_limit_bytes) {
              continue;
            }
            ++passed[7];
            result.survivors.push_back(t);
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < passed.size(); ++i) {
    if (passed[i] == 0) {
      result.binding_stage = static_cast<int>(i);
      break;
    }
  }
  return result;
}

}  // namespace

void ModelDims::Validate() const {
  const std::array<std::pair<const char*, int>, 8> fields = {{
      {"hidden", hidden},
      {"ffn", ffn},
      {"num_experts", num_experts},
      {"top_k", top_k},
      {"layers", layers},
      {"seq_len", seq_len},
      {"batch", batch},
      {"elem_bytes", elem_bytes},
  }};
  for (const auto& [name, value] : fields) {
    if (value < 1) {
      throw ValidationError(std::string(name) + " must be >= 1");
    }
  }
  if (top_k > num_experts) {
    throw ValidationError(
        "top_k=" + std::to_string(top_k) +
        " exceeds num_experts=" + std::to_string(num_experts));
  }
}

std::size_t ModelDims::TokensPerRank(const ParallelTopology& topology) const {
  const long long tokens = static_cast<long long>(batch) * seq_len;
  const long long shards =
      static_cast<long long>(topology.dp) * topology.cp * topology.tp;
  if (tokens % shards != 0) {
    throw ValidationError(
        "batch*seq_len=" + std::to_string(tokens) +
        " does not split evenly over dp*cp*tp=" + std::to_string(shards));
  }
  return static_cast<std::size_t>(tokens / shards);
}

double CostReport::Bytes(Primitive primitive) const {
  double total = primitive == Primitive::kPointToPoint ? p2p_bytes : 0.0;
  for (const CommCost& c : comms) {
    if (c.primitive == primitive) total += c.bytes();
  }
  return total;
}

double CostReport::Bytes(Primitive primitive, Span span) const {
  double total = 0.0;
  for (const CommCost& c : comms) {
    if (c.primitive == primitive) {
      total += span == Span::kIntra ? c.bytes_intra : c.bytes_inter;
    }
  }
  return total;
}

double CostReport::MoeCommTime() const {
  double t = 0.0;
  for (const CommCost& c : comms) {
    if (c.group == "ep" || c.group == "etp") t += c.time_s;
  }
  return t;
}

Span CostReport::MoeSpan() const {
  for (const CommCost& c : comms) {
    if ((c.group == "ep" || c.group == "etp") && c.bytes() > 0 &&
        c.span == Span::kInter) {
      return Span::kInter;
    }
  }
  return Span::kIntra;
}

const CommCost* CostReport::Find(const std::string& name) const {
  for (const CommCost& c : comms) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

CostReport EstimateLayerCost(const ParallelTopology& topology,
                             const ModelDims& dims, const ClusterModel& cluster,
                             const LayerLoad& load) {
  return EstimateLayerCost(topology, GenerateParallelGroups(topology), dims,
                           cluster, load);
}

CostReport EstimateLayerCost(const ParallelTopology& topology,
                             const GroupSets& groups, const ModelDims& dims,
                             const ClusterModel& cluster,
                             const LayerLoad& load) {
  topology.Validate();
  dims.Validate();
  cluster.Validate();

  const double elem = dims.elem_bytes;
  const double h = dims.hidden;
  const double k = dims.top_k;
  const int ep = topology.ep;
  const int etp = topology.etp;
  const double local = static_cast<double>(dims.num_experts) / ep;
  const double ffn_shard = static_cast<double>(dims.ffn) / etp;
  const double n = static_cast<double>(dims.TokensPerRank(topology));
  const int stage_size = topology.StageSize();

  const auto ep_groups =
      StageZero(groups.Moe(ParallelDim::kEp), topology, true);
  const auto etp_groups =
      StageZero(groups.Moe(ParallelDim::kEtp), topology, true);
  const auto edp_groups =
      StageZero(groups.Moe(ParallelDim::kEdp), topology, true);
  const auto seq_groups = StageZero(SequenceGroups(topology), topology, false);
  const std::vector<RankGroup> stage = {StageGroups(topology).front()};
  const int seq_size = topology.tp * topology.cp;
  const double expert_grad_len = local * 2.0 * h * ffn_shard;
  const double router_grad_len = h * dims.num_experts;

  PerRankBytes route_gather, dispatch_counts, dispatch, etp_counts, etp_gather,
      etp_scatter, combine, allreduce_expert, allreduce_router;
  std::function<double(int)> rows_computed;
  bool with_route_gather = false;
  bool with_backward = true;

  dispatch_counts = [&](int) { return (ep - 1) * local * elem; };
  etp_counts = [&](int) { return local * elem * (etp - 1); };

  PlanTraffic traffic;
  if (const auto* balanced = std::get_if<BalancedLoad>(&load)) {
    with_route_gather = balanced->route_gather;
    with_backward = balanced->include_backward;
    const double pairs = k * n;
    route_gather = [&, pairs](int) {
      return n * (1.0 + 2.0 * k) * elem * (seq_size - 1);
    };
    dispatch = [&, pairs](int) { return pairs * h * elem * (ep - 1) / ep; };
    combine = dispatch;
    etp_gather = [&, pairs](int) { return pairs * h * elem * (etp - 1); };
    etp_scatter = etp_gather;
    allreduce_expert = [&](int) {
      const int edp = topology.edp;
      return 2.0 * (edp - 1) / edp * expert_grad_len * elem;
    };
    allreduce_router = [&](int) {
      return 2.0 * (stage_size - 1) / stage_size * router_grad_len * elem;
    };
    rows_computed = [&, pairs](int) { return etp * pairs; };
  } else {
    const PlanLoad& plan = std::get<PlanLoad>(load);
    with_route_gather = plan.route_gather;
    with_backward = plan.include_backward;
    traffic = TraceLoad(topology, groups, plan);
    route_gather = [&](int r) {
      return static_cast<double>(plan.local_tokens[r]) * (1.0 + 2.0 * k) *
             elem * (seq_size - 1);
    };
    dispatch = [&](int r) { return traffic.dispatch_rows[r] * h * elem; };
    combine = [&](int r) { return traffic.combine_rows[r] * h * elem; };
    etp_gather = [&](int r) {
      return traffic.landed_rows[r] * h * elem * (etp - 1);
    };
    etp_scatter = [&](int r) {
      return (traffic.etp_rows[r] - traffic.landed_rows[r]) * h * elem;
    };
    // Member order inside an EDP group is ascending rank, as in the ring.
    allreduce_expert = [&](int r) {
      const RankGroup& g = groups.MoeGroupOf(ParallelDim::kEdp, r);
      const int member =
          static_cast<int>(std::find(g.begin(), g.end(), r) - g.begin());
      return static_cast<double>(RingAllReduceSendElems(
                 static_cast<std::size_t>(expert_grad_len),
                 static_cast<int>(g.size()), member)) *
             elem;
    };
    allreduce_router = [&](int r) {
      return static_cast<double>(RingAllReduceSendElems(
                 static_cast<std::size_t>(router_grad_len), stage_size, r)) *
             elem;
    };
    rows_computed = [&](int r) { return traffic.etp_rows[r]; };
  }

  CostReport report;
  report.topology = topology;
  auto add = [&](std::string name, Primitive p, std::string group_name,
                 const std::vector<RankGroup>& gs, const PerRankBytes& f) {
    report.comms.push_back(
        Aggregate(std::move(name), p, std::move(group_name), gs, f, cluster));
  };
  if (with_route_gather) {
    add("route_gather", Primitive::kAllGatherV, "seq", seq_groups,
        route_gather);
  }
  add("dispatch_counts", Primitive::kAllToAllV, "ep", ep_groups,
      dispatch_counts);
  add("dispatch", Primitive::kAllToAllV, "ep", ep_groups, dispatch);
  add("etp_counts", Primitive::kAllGatherV, "etp", etp_groups, etp_counts);
  add("etp_gather", Primitive::kAllGatherV, "etp", etp_groups, etp_gather);
  add("etp_scatter", Primitive::kReduceScatterV, "etp", etp_groups,
      etp_scatter);
  add("combine", Primitive::kAllToAllV, "ep", ep_groups, combine);
  if (with_backward) {
    add("grad_dispatch", Primitive::kAllToAllV, "ep", ep_groups, dispatch);
    add("grad_etp_gather", Primitive::kAllGatherV, "etp", etp_groups,
        etp_gather);
    add("grad_etp_scatter", Primitive::kReduceScatterV, "etp", etp_groups,
        etp_scatter);
    add("grad_combine", Primitive::kAllToAllV, "ep", ep_groups, combine);
    add("grad_allreduce_expert", Primitive::kAllReduce, "edp", edp_groups,
        allreduce_expert);
    add("grad_allreduce_router", Primitive::kAllReduce, "stage", stage,
        allreduce_router);
  }

  double max_rows = 0.0;
  for (const RankGroup& g : etp_groups) {
    for (int r : g) max_rows = std::max(max_rows, rows_computed(r));
  }
  const double flops_per_row_elem = with_backward ? 12.0 : 4.0;
  report.expert_flops = flops_per_row_elem * max_rows * h * ffn_shard;
  report.compute_time_s = report.expert_flops / cluster.peak_flops;
  for (const CommCost& c : report.comms) report.comm_time_s += c.time_s;

  report.layers_per_stage = static_cast<double>(dims.layers) / topology.pp;
  if (topology.pp > 1) {
    const auto pp_groups = groups.Attention(ParallelDim::kPp);
    Span span = Span::kIntra;
    for (const RankGroup& g : pp_groups) {
      if (ClassifyGroupSpan(g, cluster).span == Span::kInter) {
        span = Span::kInter;
      }
    }
    const double transfers = (with_backward ? 2.0 : 1.0) * (topology.pp - 1);
    const double per_transfer = n * h * elem;
    report.p2p_bytes = transfers * per_transfer * stage_size;
    report.p2p_time_s = transfers * (per_transfer / Bandwidth(span, cluster) +
                                     cluster.per_link_latency_s);
  }
  report.step_time_s =
      report.layers_per_stage * (report.comm_time_s + report.compute_time_s) +
      report.p2p_time_s;
  if (report.step_time_s > 0.0) {
    report.mfu_estimate = report.layers_per_stage * report.expert_flops /
                          (report.step_time_s * cluster.peak_flops);
  }
  return report;
}

double EstimateMemoryBytes(const ParallelTopology& topology,
                           const ModelDims& dims) {
  const double local = static_cast<double>(dims.num_experts) / topology.ep;
  const double ffn_shard = static_cast<double>(dims.ffn) / topology.etp;
  const double h = dims.hidden;
  const double n = static_cast<double>(dims.TokensPerRank(topology));
  const double layers = static_cast<double>(dims.layers) / topology.pp;
  const double params = local * 2.0 * h * ffn_shard + h * dims.num_experts;
  const double landed = topology.etp * dims.top_k * n;
  const double activations = n * h + landed * (h + 2.0 * ffn_shard);
  return layers * (2.0 * params + activations) * dims.elem_bytes;
}

std::vector<ParallelTopology> EnumerateValidConfigs(
    int world_size, const ModelDims& dims,
    const SearchConstraints& constraints) {
  return FilterConfigs(world_size, dims, constraints).survivors;
}

std::vector<CostReport> SearchBestConfig(int world_size, const ModelDims& dims,
                                         const ClusterModel& cluster,
                                         const SearchConstraints& constraints,
                                         const BalancedLoad& load) {
  dims.Validate();
  cluster.Validate();
  if (world_size < 1) throw ValidationError("world_size must be >= 1");
  const FilterResult filtered = FilterConfigs(world_size, dims, constraints);
  if (filtered.survivors.empty()) {
    throw ValidationError(
        "no valid configuration for world_size=" + std::to_string(world_size) +
        "; binding constraint: " + kFilterStages[filtered.binding_stage]);
  }
  const std::vector<ParallelTopology>& configs = filtered.survivors;
  std::vector<CostReport> reports;
  for (const ParallelTopology& t : configs) {
    reports.push_back(EstimateLayerCost(t, dims, cluster, load));
  }
  auto key = [](const ParallelTopology& t) {
    return std::make_tuple(t.tp, t.cp, t.pp, t.ep, t.etp);
  };
  std::stable_sort(reports.begin(), reports.end(),
                   [&](const CostReport& a, const CostReport& b) {
                     if (a.step_time_s != b.step_time_s) {
                       return a.step_time_s < b.step_time_s;
                     }
                     return key(a.topology) < key(b.topology);
                   });
  return reports;
}

}  // namespace foldsim
