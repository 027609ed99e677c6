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

#include "foldsim/cli.h"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include "foldsim/collectives.h"
#include "foldsim/config.h"
#include "foldsim/errors.h"
#include "foldsim/simulation.h"
#include "foldsim/topology.h"

namespace foldsim {
namespace {

std::string Printf(const char* format, ...) {
  va_list args;
  va_start(args, format);
  va_list copy;
  va_copy(copy, args);
  const int len = std::vsnprintf(nullptr, 0, format, copy);
  va_end(copy);
  std::string out(static_cast<std::size_t>(len) + 1, '\0');
  std::vsnprintf(out.data(), out.size(), format, args);
  va_end(args);
  out.pop_back();
  return out;
}

// Bytes are whole numbers except for balanced-mode averages; %.17g prints
// both exactly and identically on every run.
std::string Num(double v) { return Printf("%.17g", v); }
std::string Seconds(double v) { return Printf("%.9g", v); }

std::string OneLine(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_path;
  std::string mode = "balanced";
  std::optional<std::string> layout;
  std::optional<int> workers;
};

RunConfig ResolveConfig(const Flags& flags) {
  RunConfig config = flags.config_path.empty()
                         ? ParseRunConfig("")
                         : LoadRunConfig(flags.config_path);
  if (flags.seed) config.seed = *flags.seed;
  if (flags.workers) {
    if (*flags.workers < 1) throw ValidationError("--workers must be >= 1");
    config.workers = *flags.workers;
  }
  if (flags.layout) {
    const auto layout = ParseLayout(*flags.layout);
    if (!layout) {
      throw ValidationError("--layout must be pp-outermost or listing1, got '" +
                            *flags.layout + "'");
    }
    const ParallelTopology& t = config.topology;
    config.topology = ParallelTopology::Create(t.world_size, t.tp, t.cp, t.ep,
                                               t.etp, t.pp, *layout);
  }
  return config;
}

void WriteFile(const std::string& path, const std::string& text) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw ValidationError("cannot write '" + path + "'");
  file << text;
  if (!file) throw ValidationError("failed writing '" + path + "'");
}

std::string LoadCsvPath(const std::string& out_path) {
  const std::string suffix = ".csv";
  if (out_path.size() > suffix.size() &&
      out_path.compare(out_path.size() - suffix.size(), suffix.size(),
                       suffix) == 0) {
    return out_path.substr(0, out_path.size() - suffix.size()) + "_load.csv";
  }
  return out_path + "_load.csv";
}

std::string FormatCostReport(const CostReport& report, std::string_view mode) {
  std::ostringstream os;
  os << "topology: " << report.topology.ToString() << "\n";
  os << "mode: " << mode << "\n";
  os << "component,primitive,group,span,nodes,bytes_intra,bytes_inter,"
        "max_rank_bytes,time_s\n";
  for (const CommCost& c : report.comms) {
    os << c.name << ',' << PrimitiveName(c.primitive) << ',' << c.group << ','
       << SpanName(c.span) << ',' << c.node_count << ',' << Num(c.bytes_intra)
       << ',' << Num(c.bytes_inter) << ',' << Num(c.max_rank_bytes) << ','
       << Seconds(c.time_s) << "\n";
  }
  os << "expert_flops: " << Num(report.expert_flops) << "\n";
  os << "layer_comm_time_s: " << Seconds(report.comm_time_s) << "\n";
  os << "layer_moe_comm_time_s: " << Seconds(report.MoeCommTime()) << "\n";
  os << "layer_compute_time_s: " << Seconds(report.compute_time_s) << "\n";
  os << "layers_per_stage: " << Num(report.layers_per_stage) << "\n";
  os << "p2p_bytes: " << Num(report.p2p_bytes) << "\n";
  os << "p2p_time_s: " << Seconds(report.p2p_time_s) << "\n";
  os << "step_time_s: " << Seconds(report.step_time_s) << "\n";
  os << "mfu_estimate: " << Seconds(report.mfu_estimate) << "\n";
  return os.str();
}

// Per-primitive ledger totals against the plan-mode estimate.
bool LedgerMatches(const CostReport& report, const TrafficStats& traffic) {
  for (Primitive p : {Primitive::kAllToAllV, Primitive::kAllGatherV,
                      Primitive::kReduceScatterV, Primitive::kAllReduce}) {
    for (Span s : {Span::kIntra, Span::kInter}) {
      if (report.Bytes(p, s) != static_cast<double>(traffic.Bytes(p, s))) {
        return false;
      }
    }
  }
  return true;
}

CostReport CostFor(const RunConfig& config, const std::string& mode,
                   std::ostream* out) {
  if (mode == "balanced") {
    BalancedLoad load;
    load.route_gather = config.router.capacity_factor.has_value() &&
                        config.router.drop_mode == DropMode::kFullSequence;
    load.include_backward = config.backward;
    return EstimateLayerCost(config.topology, config.dims, config.cluster,
                             load);
  }
  if (mode != "plan") {
    throw ValidationError("--mode must be balanced or plan, got '" + mode +
                          "'");
  }
  SimulationSpec spec = config.ToSimulationSpec();
  spec.grad_check = false;
  const SimulationResult sim = RunSimulation(spec);
  CostReport report = EstimateLayerCost(config.topology, config.dims,
                                        config.cluster, sim.plan_load);
  if (!LedgerMatches(report, sim.traffic)) {
    throw InvariantError("plan-mode bytes differ from the traffic ledger");
  }
  if (out) *out << "ledger_match: true\n";
  return report;
}

std::string SimulationCsv(const RunConfig& config,
                          const SimulationResult& sim) {
  const ParallelTopology& t = config.topology;
  std::ostringstream os;
  os << kCsvHeader << "\n";
  int id = 0;
  for (Span span : {Span::kIntra, Span::kInter}) {
    double all = 0.0;
    for (const auto& [p, by_span] : sim.traffic.bytes) {
      all += static_cast<double>(by_span[static_cast<int>(span)]);
    }
    const double bw = span == Span::kIntra ? config.cluster.intra_bw
                                           : config.cluster.inter_bw;
    const double comm = all / bw;
    os << id++ << ',' << t.tp << ',' << t.cp << ',' << t.pp << ',' << t.ep
       << ',' << t.etp << ',' << SpanName(span) << ','
       << sim.traffic.Bytes(Primitive::kAllToAllV, span) << ','
       << sim.traffic.Bytes(Primitive::kAllGatherV, span) << ','
       << sim.traffic.Bytes(Primitive::kReduceScatterV, span) << ','
       << sim.traffic.Bytes(Primitive::kPointToPoint, span) << ','
       << Seconds(comm) << ',' << Seconds(0.0) << ',' << Seconds(comm) << ','
       << Seconds(0.0) << "\n";
  }
  return os.str();
}

std::string LoadCsv(const SimulationResult& sim) {
  std::ostringstream os;
  os << "expert,kept_pairs,imbalance,aux_loss\n";
  for (std::size_t e = 0; e < sim.load.counts.size(); ++e) {
    os << e << ',' << sim.load.counts[e] << ',' << Seconds(sim.load.imbalance)
       << ',' << Seconds(sim.load.aux_loss) << "\n";
  }
  return os.str();
}

int ValidateGroups(const Flags& flags, std::ostream& out, std::ostream& err) {
  const RunConfig config = ResolveConfig(flags);
  const GroupSets groups = GenerateParallelGroups(config.topology);
  out << "topology: " << config.topology.ToString() << "\n";
  out << FormatGroupSets(groups);
  const auto verdict = CheckPpConsistency(groups);
  if (verdict.consistent) {
    out << "pp_consistency: consistent\n";
    return 0;
  }
  auto render = [](const RankGroup& g) {
    std::string s = "[";
    for (std::size_t i = 0; i < g.size(); ++i) {
      s += (i ? "," : "") + std::to_string(g[i]);
    }
    return s + "]";
  };
  const auto& [attn, moe] = *verdict.mismatch;
  out << "pp_consistency: inconsistent attention=" << render(attn)
      << " moe=" << render(moe) << "\n";
  err << "error: validation: attention pp group " << render(attn)
      << " has no identical moe pp group (first mismatch moe " << render(moe)
      << ")\n";
  return 2;
}

int Simulate(const Flags& flags, std::ostream& out) {
  const RunConfig config = ResolveConfig(flags);
  const SimulationResult sim = RunSimulation(config.ToSimulationSpec());
  out << "topology: " << config.topology.ToString() << "\n";
  out << "seed: " << config.seed << "\n";
  out << "oracle_max_rel_error: " << Printf("%.3e", sim.max_rel_error) << "\n";
  out << "kept_sets_match: " << (sim.kept_sets_match ? "true" : "false")
      << "\n";
  out << "kept_pairs: " << sim.kept_pairs << "\n";
  out << "dropped_pairs: " << sim.dropped_pairs << "\n";
  out << "load_imbalance: " << Seconds(sim.load.imbalance) << "\n";
  out << "aux_loss: " << Seconds(sim.load.aux_loss) << "\n";
  if (sim.grad_check) {
    const GradCheck& g = *sim.grad_check;
    out << "grad_rel_error.input: " << Printf("%.3e", g.input) << "\n";
    out << "grad_rel_error.gate_weights: " << Printf("%.3e", g.gate_weights)
        << "\n";
    out << "grad_rel_error.w1: " << Printf("%.3e", g.w1) << "\n";
    out << "grad_rel_error.w2: " << Printf("%.3e", g.w2) << "\n";
    out << "grad_unstable_probes: " << g.unstable_probes << "\n";
  }
  for (const auto& [p, by_span] : sim.traffic.bytes) {
    for (Span s : {Span::kIntra, Span::kInter}) {
      out << "traffic." << PrimitiveName(p) << '.' << SpanName(s) << ": "
          << by_span[static_cast<int>(s)] << "\n";
    }
  }
  if (!flags.out_path.empty()) {
    WriteFile(flags.out_path, SimulationCsv(config, sim));
    WriteFile(LoadCsvPath(flags.out_path), LoadCsv(sim));
  }
  return 0;
}

int Cost(const Flags& flags, std::ostream& out) {
  const RunConfig config = ResolveConfig(flags);
  const CostReport report = CostFor(config, flags.mode, &out);
  out << FormatCostReport(report, flags.mode);
  if (!flags.out_path.empty()) {
    WriteFile(flags.out_path,
              std::string(kCsvHeader) + "\n" + CostCsvRow(0, report) + "\n");
  }
  return 0;
}

int Search(const Flags& flags, std::ostream& out) {
  const RunConfig config = ResolveConfig(flags);
  BalancedLoad load;
  load.route_gather = config.router.capacity_factor.has_value() &&
                      config.router.drop_mode == DropMode::kFullSequence;
  load.include_backward = config.backward;
  const std::vector<CostReport> ranked =
      SearchBestConfig(config.topology.world_size, config.dims, config.cluster,
                       config.search, load);
  std::ostringstream csv;
  csv << kCsvHeader << "\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    csv << CostCsvRow(static_cast<int>(i), ranked[i]) << "\n";
  }
  out << csv.str();
  if (!flags.out_path.empty()) WriteFile(flags.out_path, csv.str());
  return 0;
}

int EmitCsv(const Flags& flags, std::ostream& out) {
  const RunConfig config = ResolveConfig(flags);
  const CostReport report = CostFor(config, flags.mode, nullptr);
  const std::string csv =
      std::string(kCsvHeader) + "\n" + CostCsvRow(0, report) + "\n";
  if (flags.out_path.empty()) {
    out << csv;
  } else {
    WriteFile(flags.out_path, csv);
  }
  return 0;
}

}  // namespace

std::string CostCsvRow(int config_id, const CostReport& report) {
  const ParallelTopology& t = report.topology;
  const double layers = report.layers_per_stage;
  std::ostringstream os;
  os << config_id << ',' << t.tp << ',' << t.cp << ',' << t.pp << ',' << t.ep
     << ',' << t.etp << ',' << SpanName(report.MoeSpan()) << ','
     << Num(report.Bytes(Primitive::kAllToAllV)) << ','
     << Num(report.Bytes(Primitive::kAllGatherV)) << ','
     << Num(report.Bytes(Primitive::kReduceScatterV)) << ','
     << Num(report.p2p_bytes) << ','
     << Seconds(layers * report.comm_time_s + report.p2p_time_s) << ','
     << Seconds(layers * report.compute_time_s) << ','
     << Seconds(report.step_time_s) << ',' << Seconds(report.mfu_estimate);
  return os.str();
}

int RunCli(const std::vector<std::string>& args, std::ostream& out,
           std::ostream& err) {
  CLI::App app{"MoE parallel folding simulator and planner", "foldsim"};
  app.require_subcommand(1);
  Flags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config_path, "run config file")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "override the config seed");
    sub->add_option("--layout", flags.layout,
                    "rank layout: pp-outermost or listing1");
  };
  auto* validate = app.add_subcommand("validate-groups",
                                      "print the rank groups of both meshes");
  auto* simulate =
      app.add_subcommand("simulate", "run one MoE layer against the oracle");
  auto* cost = app.add_subcommand("cost", "cost report for one config");
  auto* search = app.add_subcommand("search", "rank every valid config");
  auto* emit = app.add_subcommand("emit-csv", "cost breakdown as CSV");
  for (CLI::App* sub : {validate, simulate, cost, search, emit}) {
    add_common(sub);
  }
  for (CLI::App* sub : {simulate, cost, search, emit}) {
    sub->add_option("--out", flags.out_path, "CSV output path");
  }
  for (CLI::App* sub : {simulate, cost, emit}) {
    sub->add_option("--workers", flags.workers, "rank scheduler threads");
  }
  for (CLI::App* sub : {cost, emit}) {
    sub->add_option("--mode", flags.mode, "balanced or plan")
        ->check(CLI::IsMember({"balanced", "plan"}));
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << OneLine(e.what()) << "\n";
    return 2;
  }

  try {
    if (validate->parsed()) return ValidateGroups(flags, out, err);
    if (simulate->parsed()) return Simulate(flags, out);
    if (cost->parsed()) return Cost(flags, out);
    if (search->parsed()) return Search(flags, out);
    return EmitCsv(flags, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.kind() << ": " << OneLine(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << OneLine(e.what()) << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: internal: " << OneLine(e.what()) << "\n";
    return 3;
  }
}

}  // namespace foldsim
