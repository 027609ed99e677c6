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

// One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "foldsim/cli.h"
#include "foldsim/costmodel.h"
#include "foldsim/simulation.h"
#include "foldsim/topology.h"

namespace foldsim {
namespace {

constexpr double kOracleTolerance = 1e-9;
constexpr double kGradTolerance = 1e-5;
constexpr double kFdEps = 1e-5;
constexpr double kGroupsBudgetS = 10.0;
constexpr double kOracleBudgetS = 60.0;
constexpr double kGradBudgetS = 60.0;

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Groups = std::vector<RankGroup>;

// Enumerates a four-axis mesh (slowest axis first) and collects the groups
// along `axis`, independent of the library's stride arithmetic.
Groups Enumerate(const std::array<int, 4>& sizes, int axis,
                 const std::function<int(int, int, int, int)>& rank_of) {
  std::map<std::array<int, 4>, RankGroup> by_key;
  for (int a = 0; a < sizes[0]; ++a) {
    for (int b = 0; b < sizes[1]; ++b) {
      for (int c = 0; c < sizes[2]; ++c) {
        for (int d = 0; d < sizes[3]; ++d) {
          std::array<int, 4> key = {a, b, c, d};
          key[axis] = -1;
          by_key[key].push_back(rank_of(a, b, c, d));
        }
      }
    }
  }
  Groups out;
  for (auto& [key, g] : by_key) out.push_back(g);
  std::sort(out.begin(), out.end());
  return out;
}

Groups Sorted(Groups g) {
  std::sort(g.begin(), g.end());
  return g;
}

bool MatchesBruteForce(const ParallelTopology& t, const GroupSets& groups) {
  const bool listing1 = t.layout == LayoutOrder::kListing1;
  auto attn = [&](int d, int p, int c, int x) {
    return listing1 ? ((d * t.pp + p) * t.cp + c) * t.tp + x
                    : ((p * t.dp + d) * t.cp + c) * t.tp + x;
  };
  auto moe = [&](int d, int p, int e, int x) {
    return listing1 ? ((d * t.pp + p) * t.ep + e) * t.etp + x
                    : ((p * t.edp + d) * t.ep + e) * t.etp + x;
  };
  const std::array<int, 4> a = {t.dp, t.pp, t.cp, t.tp};
  const std::array<int, 4> m = {t.edp, t.pp, t.ep, t.etp};
  const ParallelDim a_dims[] = {ParallelDim::kDp, ParallelDim::kPp,
                                ParallelDim::kCp, ParallelDim::kTp};
  const ParallelDim m_dims[] = {ParallelDim::kEdp, ParallelDim::kPp,
                                ParallelDim::kEp, ParallelDim::kEtp};
  for (int axis = 0; axis < 4; ++axis) {
    if (Sorted(groups.Attention(a_dims[axis])) != Enumerate(a, axis, attn)) {
      return false;
    }
    if (Sorted(groups.Moe(m_dims[axis])) != Enumerate(m, axis, moe)) {
      return false;
    }
  }
  return true;
}

std::vector<ParallelTopology> AllTopologies(int max_world, LayoutOrder layout) {
  std::vector<ParallelTopology> out;
  for (int w = 1; w <= max_world; ++w) {
    for (int tp = 1; tp <= w; ++tp) {
      for (int cp = 1; tp * cp <= w; ++cp) {
        for (int pp = 1; tp * cp * pp <= w; ++pp) {
          if (w % (tp * cp * pp) != 0) continue;
          for (int ep = 1; ep * pp <= w; ++ep) {
            for (int etp = 1; ep * etp * pp <= w; ++etp) {
              if (w % (ep * etp * pp) != 0) continue;
              out.push_back(
                  ParallelTopology::Create(w, tp, cp, ep, etp, pp, layout));
            }
          }
        }
      }
    }
  }
  return out;
}

bool IsPartition(const Groups& groups, int world, int degree) {
  std::vector<int> seen(world, 0);
  for (const RankGroup& g : groups) {
    if (static_cast<int>(g.size()) != degree) return false;
    for (int r : g) {
      if (r < 0 || r >= world) return false;
      ++seen[r];
    }
  }
  return std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; });
}

bool PartitionsHold(const ParallelTopology& t, const GroupSets& g) {
  const int w = t.world_size;
  return IsPartition(g.Attention(ParallelDim::kTp), w, t.tp) &&
         IsPartition(g.Attention(ParallelDim::kCp), w, t.cp) &&
         IsPartition(g.Attention(ParallelDim::kDp), w, t.dp) &&
         IsPartition(g.Attention(ParallelDim::kPp), w, t.pp) &&
         IsPartition(g.Moe(ParallelDim::kEtp), w, t.etp) &&
         IsPartition(g.Moe(ParallelDim::kEp), w, t.ep) &&
         IsPartition(g.Moe(ParallelDim::kEdp), w, t.edp) &&
         IsPartition(g.Moe(ParallelDim::kPp), w, t.pp);
}

Outcome GroupFidelity() {
  Outcome o;
  const auto listing =
      ParallelTopology::Create(64, 2, 2, 2, 2, 2, LayoutOrder::kListing1);
  if (!MatchesBruteForce(listing, GenerateParallelGroups(listing))) {
    o.pass = false;
    o.detail = "listing1 world=64 groups differ from enumeration; ";
  }
  int checked = 0;
  for (LayoutOrder layout :
       {LayoutOrder::kPpOutermost, LayoutOrder::kListing1}) {
    for (const ParallelTopology& t : AllTopologies(64, layout)) {
      const GroupSets g = GenerateParallelGroups(t);
      ++checked;
      if (!PartitionsHold(t, g)) {
        o.pass = false;
        o.detail += "partition broken at " + t.ToString() + "; ";
        break;
      }
    }
  }
  o.detail += "tuples=" + std::to_string(checked);
  return o;
}

Outcome PpConsistencyCheck() {
  Outcome o;
  int checked = 0;
  for (const ParallelTopology& t :
       AllTopologies(64, LayoutOrder::kPpOutermost)) {
    ++checked;
    if (!CheckPpConsistency(GenerateParallelGroups(t)).consistent) {
      o.pass = false;
      o.detail = "inconsistent under pp-outermost: " + t.ToString() + "; ";
      break;
    }
  }
  const auto bad =
      ParallelTopology::Create(8, 2, 2, 2, 1, 2, LayoutOrder::kListing1);
  if (CheckPpConsistency(GenerateParallelGroups(bad)).consistent) {
    o.pass = false;
    o.detail += "listing1 world=8 tp=2 cp=2 pp=2 ep=2 not detected; ";
  }
  o.detail += "pp-outermost tuples=" + std::to_string(checked) +
              ", listing1 mismatch detected";
  return o;
}

struct GridPoint {
  int tp, cp, ep, etp;
};
constexpr GridPoint kGrid[] = {
    {1, 1, 1, 1}, {2, 1, 2, 1}, {1, 2, 4, 1}, {2, 2, 2, 2}, {1, 1, 4, 2}};

SimulationSpec GridSpec(const GridPoint& p, int experts, int top_k,
                        std::uint64_t seed) {
  const int world = std::lcm(p.tp * p.cp, p.ep * p.etp);
  SimulationSpec spec;
  spec.topology = ParallelTopology::Create(world, p.tp, p.cp, p.ep, p.etp, 1);
  spec.dims.hidden = 16;
  spec.dims.ffn = 32;
  spec.dims.num_experts = experts;
  spec.dims.top_k = top_k;
  spec.dims.seq_len = 64;
  spec.dims.batch = spec.topology.dp;
  spec.seed = seed;
  spec.backward = false;
  return spec;
}

// Runs the (tp, cp, ep, etp) x E x k x seed grid with one router setting.
Outcome OracleGrid(const RouterConfig& router, bool require_drops) {
  Outcome o;
  double worst = 0.0;
  int runs = 0;
  std::size_t dropped = 0;
  for (const GridPoint& p : kGrid) {
    for (int experts : {4, 8}) {
      for (int k : {1, 2}) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
          SimulationSpec spec = GridSpec(p, experts, k, seed);
          spec.router = router;
          const SimulationResult r = RunSimulation(spec);
          ++runs;
          dropped += r.dropped_pairs;
          worst = std::max(worst, r.max_rel_error);
          if (!r.kept_sets_match || !(r.max_rel_error <= kOracleTolerance)) {
            o.pass = false;
            o.detail += spec.topology.ToString() +
                        " E=" + std::to_string(experts) +
                        " k=" + std::to_string(k) +
                        " seed=" + std::to_string(seed) + " failed; ";
          }
        }
      }
    }
  }
  if (require_drops && dropped == 0) {
    o.pass = false;
    o.detail += "no pair was dropped, capacity path not exercised; ";
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "runs=%d max_rel_error=%.3e dropped_pairs=%zu", runs, worst,
                dropped);
  o.detail += buf;
  return o;
}

Outcome OracleDropless() { return OracleGrid(RouterConfig{}, false); }

Outcome OracleDropping() {
  Outcome full, sub;
  RouterConfig router;
  router.capacity_factor = 1.0;
  router.drop_mode = DropMode::kFullSequence;
  full = OracleGrid(router, true);
  router.drop_mode = DropMode::kSubSequence;
  sub = OracleGrid(router, true);
  return {full.pass && sub.pass,
          "full-sequence: " + full.detail + "; sub-sequence: " + sub.detail};
}

Outcome GradientCheck() {
  Outcome o;
  const GridPoint points[] = {{2, 1, 2, 2}, {1, 2, 4, 1}, {1, 1, 2, 2}};
  std::size_t unstable = 0;
  double worst = 0.0;
  for (const GridPoint& p : points) {
    for (bool dropping : {false, true}) {
      SimulationSpec spec;
      spec.topology = ParallelTopology::Create(4, p.tp, p.cp, p.ep, p.etp, 1);
      spec.dims.hidden = 8;
      spec.dims.ffn = 16;
      spec.dims.num_experts = 4;
      spec.dims.top_k = 2;
      spec.dims.seq_len = 16;
      spec.dims.batch = spec.topology.dp;
      spec.activation = Activation::kGelu;
      spec.seed = 11;
      spec.grad_check = true;
      spec.fd_eps = kFdEps;
      if (dropping) {
        spec.router.capacity_factor = 1.0;
        spec.router.drop_mode = DropMode::kFullSequence;
      }
      const SimulationResult r = RunSimulation(spec);
      const GradCheck& g = *r.grad_check;
      unstable += g.unstable_probes;
      worst = std::max(worst, g.worst());
      if (!(g.worst() <= kGradTolerance)) {
        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "%s: input=%.2e gate=%.2e w1=%.2e w2=%.2e; ",
                      spec.topology.ToString().c_str(), g.input, g.gate_weights,
                      g.w1, g.w2);
        o.pass = false;
        o.detail += buf;
      }
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "max_rel_error=%.3e skipped_unstable_probes=%zu", worst,
                unstable);
  o.detail += buf;
  return o;
}

Outcome TrafficExactness() {
  Outcome o;
  const GridPoint points[] = {
      {2, 2, 4, 2}, {2, 1, 2, 1}, {1, 2, 4, 1}, {2, 2, 2, 2}, {1, 1, 4, 2}};
  double total = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const GridPoint& p = points[seed % 5];
    SimulationSpec spec = GridSpec(p, 8, 2, seed);
    spec.backward = seed % 2 == 0;
    if (seed % 3 == 1) {
      spec.router.capacity_factor = 1.0;
      spec.router.drop_mode = DropMode::kFullSequence;
    } else if (seed % 3 == 2) {
      spec.router.capacity_factor = 1.25;
      spec.router.drop_mode = DropMode::kSubSequence;
    }
    const SimulationResult r = RunSimulation(spec);
    const CostReport report =
        EstimateLayerCost(spec.topology, spec.dims, spec.cluster, r.plan_load);
    for (Primitive prim : {Primitive::kAllToAllV, Primitive::kAllGatherV,
                           Primitive::kReduceScatterV, Primitive::kAllReduce}) {
      for (Span s : {Span::kIntra, Span::kInter}) {
        const double est = report.Bytes(prim, s);
        const double led = static_cast<double>(r.traffic.Bytes(prim, s));
        total += led;
        if (est != led) {
          o.pass = false;
          o.detail += "seed=" + std::to_string(seed) + " " +
                      std::string(PrimitiveName(prim)) + " estimate " +
                      std::to_string(est) + " ledger " + std::to_string(led) +
                      "; ";
        }
      }
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "simulations=10 ledger_bytes=%.0f", total);
  o.detail += buf;
  return o;
}

double MoeLayerTime(int ep, int etp, const ModelDims& dims) {
  const int world = ep * etp;
  const auto t = ParallelTopology::Create(world, 1, 1, ep, etp, 1);
  const CostReport r =
      EstimateLayerCost(t, dims, ClusterModel{}, BalancedLoad{});
  return r.MoeCommTime() + r.compute_time_s;
}

Outcome EpBeatsEtp() {
  Outcome o;
  ModelDims fine;
  fine.hidden = 512;
  fine.ffn = 1024;
  fine.num_experts = 64;
  fine.top_k = 8;
  fine.seq_len = 4096;
  ModelDims coarse = fine;
  coarse.num_experts = 8;
  coarse.top_k = 2;
  coarse.hidden = 4096;
  coarse.ffn = 14336;
  struct Case {
    const char* name;
    const ModelDims* dims;
    int p;
    int ep;  // ep for the EP-heavy side; etp = p / ep
  };
  // Coarse dims with P=16 cannot use ep=16 because E=8, so the EP-heavy side
  // keeps ep=E and folds the remaining factor into ETP.
  const Case cases[] = {{"fine", &fine, 8, 8},
                        {"fine", &fine, 16, 16},
                        {"coarse", &coarse, 8, 8},
                        {"coarse", &coarse, 16, 8}};
  for (const Case& c : cases) {
    ModelDims d = *c.dims;
    d.batch = c.p;
    const double ep_time = MoeLayerTime(c.ep, c.p / c.ep, d);
    const double etp_time = MoeLayerTime(1, c.p, d);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s P=%d ep%d/etp%d=%.3es etp%d=%.3es; ",
                  c.name, c.p, c.ep, c.p / c.ep, ep_time, c.p, etp_time);
    o.detail += buf;
    if (!(ep_time < etp_time)) o.pass = false;
  }
  o.detail.resize(o.detail.size() - 2);
  return o;
}

double AllToAllTime(const CostReport& r) {
  double t = 0.0;
  for (const CommCost& c : r.comms) {
    if (c.primitive == Primitive::kAllToAllV) t += c.time_s;
  }
  return t;
}

Outcome FoldingSpan() {
  Outcome o;
  ClusterModel cluster;
  cluster.node_size = 8;
  const auto t = ParallelTopology::Create(16, 2, 4, 8, 1, 1);
  ModelDims dims;
  dims.hidden = 4096;
  dims.ffn = 14336;
  dims.num_experts = 8;
  dims.top_k = 2;
  dims.seq_len = 4096;
  dims.batch = t.dp;
  const GroupSets folded = GenerateParallelGroups(t);
  const GroupSets legacy = GenerateLegacyParallelGroups(t);
  const SpanInfo fs =
      ClassifyGroupSpan(folded.MoeGroupOf(ParallelDim::kEp, 0), cluster);
  const SpanInfo ls =
      ClassifyGroupSpan(legacy.MoeGroupOf(ParallelDim::kEp, 0), cluster);
  const double f =
      AllToAllTime(EstimateLayerCost(t, folded, dims, cluster, BalancedLoad{}));
  const double l =
      AllToAllTime(EstimateLayerCost(t, legacy, dims, cluster, BalancedLoad{}));
  o.pass = fs.span == Span::kIntra && ls.span == Span::kInter && f < l;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "folded ep span=%s a2a=%.3es, legacy ep span=%s nodes=%d "
                "a2a=%.3es",
                std::string(SpanName(fs.span)).c_str(), f,
                std::string(SpanName(ls.span)).c_str(), ls.node_count, l);
  o.detail = buf;
  return o;
}

std::string Slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome Determinism() {
  namespace fs = std::filesystem;
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "foldsim_acceptance_ac9";
  fs::create_directories(dir);
  const std::string configs[] = {
      "seed = 5\n[topology]\nworld_size = 8\ntp = 2\ncp = 2\nep = 4\n"
      "etp = 2\n[model]\nnum_experts = 8\ntop_k = 2\nbatch = 2\n"
      "[router]\ncapacity_factor = 1.0\ndrop_mode = full-sequence\n",
      "seed = 9\n[topology]\nworld_size = 8\ncp = 2\nep = 8\n"
      "[model]\nnum_experts = 8\ntop_k = 2\nbatch = 4\n"
      "[router]\ngate_fn = sigmoid\nrenormalize = true\n"};
  int compared = 0;
  for (std::size_t i = 0; i < std::size(configs); ++i) {
    const fs::path cfg = dir / ("run" + std::to_string(i) + ".ini");
    std::ofstream(cfg) << configs[i];
    std::string stdout_text[2];
    std::string csv[2];
    for (int w = 0; w < 2; ++w) {
      const fs::path out = dir / ("out" + std::to_string(w) + ".csv");
      std::ostringstream so, se;
      const int code =
          RunCli({"simulate", "--config", cfg.string(), "--workers",
                  w == 0 ? "1" : "4", "--out", out.string()},
                 so, se);
      if (code != 0) {
        o.pass = false;
        o.detail += "simulate exited " + std::to_string(code) + ": " + se.str();
      }
      stdout_text[w] = so.str();
      csv[w] =
          Slurp(out) + Slurp(dir / ("out" + std::to_string(w) + "_load.csv"));
    }
    ++compared;
    if (csv[0].empty() || csv[0] != csv[1] ||
        stdout_text[0] != stdout_text[1]) {
      o.pass = false;
      o.detail += "config " + std::to_string(i) + " differs; ";
    }
  }
  fs::remove_all(dir);
  o.detail += "configs=" + std::to_string(compared) + " workers 1 vs 4";
  return o;
}

}  // namespace
}  // namespace foldsim

int main() {
  using foldsim::Outcome;
  struct Criterion {
    const char* id;
    const char* name;
    Outcome (*run)();
    double budget_s;  // 0 means no runtime bound
  };
  const Criterion criteria[] = {
      {"AC1", "group-generation fidelity", foldsim::GroupFidelity,
       foldsim::kGroupsBudgetS},
      {"AC2", "pp consistency", foldsim::PpConsistencyCheck, 0.0},
      {"AC3", "oracle equivalence dropless", foldsim::OracleDropless,
       foldsim::kOracleBudgetS},
      {"AC4", "oracle equivalence dropping", foldsim::OracleDropping, 0.0},
      {"AC5", "gradient check", foldsim::GradientCheck, foldsim::kGradBudgetS},
      {"AC6", "traffic exactness", foldsim::TrafficExactness, 0.0},
      {"AC7", "ep beats etp", foldsim::EpBeatsEtp, 0.0},
      {"AC8", "folding keeps ep intra-node", foldsim::FoldingSpan, 0.0},
      {"AC9", "determinism", foldsim::Determinism, 0.0},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (c.budget_s > 0.0 && elapsed >= c.budget_s) {
      o.pass = false;
      o.detail += "; over runtime budget";
    }
    if (!o.pass) ++failures;
    std::printf("%s %s %s: %s (%.2fs)\n", c.id, o.pass ? "PASS" : "FAIL",
                c.name, o.detail.c_str(), elapsed);
  }
  return failures == 0 ? 0 : 1;
}
