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

#include "foldsim/topology.h"

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

// A mesh is a list of axis sizes, slowest-varying first. Rank ids are the
// row-major linearization of the coordinates.
struct Mesh {
  std::vector<int> sizes;

  std::vector<int> Strides() const {
    std::vector<int> strides(sizes.size(), 1);
    for (int a = static_cast<int>(sizes.size()) - 2; a >= 0; --a) {
      strides[a] = strides[a + 1] * sizes[a + 1];
    }
    return strides;
  }

  // Groups that vary `axis` while holding every other axis fixed. Groups are
  // enumerated with the remaining axes in mesh order, which is also the order
  // of their first rank.
  std::vector<RankGroup> GroupsAlong(int axis) const {
    const std::vector<int> strides = Strides();
    std::vector<int> others;
    for (int a = 0; a < static_cast<int>(sizes.size()); ++a) {
      if (a != axis) others.push_back(a);
    }
    int outer_count = 1;
    for (int a : others) outer_count *= sizes[a];

    std::vector<RankGroup> groups;
    groups.reserve(outer_count);
    for (int flat = 0; flat < outer_count; ++flat) {
      int rem = flat;
      int base = 0;
      for (int i = static_cast<int>(others.size()) - 1; i >= 0; --i) {
        const int a = others[i];
        base += (rem % sizes[a]) * strides[a];
        rem /= sizes[a];
      }
      RankGroup group(sizes[axis]);
      for (int c = 0; c < sizes[axis]; ++c) group[c] = base + c * strides[axis];
      groups.push_back(std::move(group));
    }
    return groups;
  }

  std::vector<int> Coords(int rank) const {
    std::vector<int> coords(sizes.size());
    for (int a = static_cast<int>(sizes.size()) - 1; a >= 0; --a) {
      coords[a] = rank % sizes[a];
      rank /= sizes[a];
    }
    return coords;
  }
};

// Axis positions inside the attention mesh for each layout.
struct AttentionAxes {
  int dp, pp, cp, tp;
};
struct MoeAxes {
  int edp, pp, ep, etp;
};

AttentionAxes AttentionAxesFor(LayoutOrder layout) {
  if (layout == LayoutOrder::kListing1) return {0, 1, 2, 3};
  return {1, 0, 2, 3};
}

MoeAxes MoeAxesFor(LayoutOrder layout) {
  if (layout == LayoutOrder::kListing1) return {0, 1, 2, 3};
  return {1, 0, 2, 3};
}

Mesh AttentionMesh(const ParallelTopology& t) {
  const AttentionAxes ax = AttentionAxesFor(t.layout);
  std::vector<int> sizes(4);
  sizes[ax.dp] = t.dp;
  sizes[ax.pp] = t.pp;
  sizes[ax.cp] = t.cp;
  sizes[ax.tp] = t.tp;
  return Mesh{sizes};
}

Mesh MoeMesh(const ParallelTopology& t) {
  const MoeAxes ax = MoeAxesFor(t.layout);
  std::vector<int> sizes(4);
  sizes[ax.edp] = t.edp;
  sizes[ax.pp] = t.pp;
  sizes[ax.ep] = t.ep;
  sizes[ax.etp] = t.etp;
  return Mesh{sizes};
}

void SortGroups(std::vector<RankGroup>& groups) {
  for (RankGroup& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end());
}

const RankGroup& GroupContaining(const std::vector<RankGroup>& groups,
                                 int rank) {
  for (const RankGroup& g : groups) {
    if (std::find(g.begin(), g.end(), rank) != g.end()) return g;
  }
  throw ValidationError("rank " + std::to_string(rank) +
                        " is not a member of any group");
}

std::string FormatGroup(const RankGroup& group) {
  std::string out = "[";
  for (size_t i = 0; i < group.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(group[i]);
  }
  return out + "]";
}

}  // namespace

std::string_view LayoutName(LayoutOrder layout) {
  return layout == LayoutOrder::kListing1 ? "listing1" : "pp-outermost";
}

std::optional<LayoutOrder> ParseLayout(std::string_view name) {
  if (name == "pp-outermost") return LayoutOrder::kPpOutermost;
  if (name == "listing1") return LayoutOrder::kListing1;
  return std::nullopt;
}

ParallelTopology ParallelTopology::Create(int world_size, int tp, int cp,
                                          int ep, int etp, int pp,
                                          LayoutOrder layout) {
  ParallelTopology t;
  t.world_size = world_size;
  t.tp = tp;
  t.cp = cp;
  t.pp = pp;
  t.etp = etp;
  t.ep = ep;
  t.layout = layout;
  if (world_size < 1 || tp < 1 || cp < 1 || pp < 1 || ep < 1 || etp < 1) {
    throw ValidationError("all parallel degrees and world_size must be >= 1");
  }
  if (world_size % (tp * cp * pp) != 0) {
    throw ValidationError(
        "tp*cp*pp=" + std::to_string(tp * cp * pp) +
        " does not divide world_size=" + std::to_string(world_size));
  }
  if (world_size % (etp * ep * pp) != 0) {
    throw ValidationError(
        "etp*ep*pp=" + std::to_string(etp * ep * pp) +
        " does not divide world_size=" + std::to_string(world_size));
  }
  t.dp = world_size / (tp * cp * pp);
  t.edp = world_size / (etp * ep * pp);
  return t;
}

void ParallelTopology::Validate() const {
  const std::array<std::pair<const char*, int>, 8> degrees = {{
      {"world_size", world_size},
      {"tp", tp},
      {"cp", cp},
      {"pp", pp},
      {"dp", dp},
      {"etp", etp},
      {"ep", ep},
      {"edp", edp},
  }};
  for (const auto& [name, value] : degrees) {
    if (value < 1) {
      throw ValidationError(std::string(name) + " must be >= 1, got " +
                            std::to_string(value));
    }
    if (world_size % value != 0) {
      throw ValidationError(
          std::string(name) + "=" + std::to_string(value) +
          " does not divide world_size=" + std::to_string(world_size));
    }
  }
  if (tp * cp * dp * pp != world_size) {
    throw ValidationError("tp*cp*dp*pp=" + std::to_string(tp * cp * dp * pp) +
                          " != world_size=" + std::to_string(world_size));
  }
  if (etp * ep * edp * pp != world_size) {
    throw ValidationError(
        "etp*ep*edp*pp=" + std::to_string(etp * ep * edp * pp) +
        " != world_size=" + std::to_string(world_size));
  }
}

std::string ParallelTopology::ToString() const {
  std::ostringstream os;
  os << "world=" << world_size << " tp=" << tp << " cp=" << cp << " dp=" << dp
     << " pp=" << pp << " etp=" << etp << " ep=" << ep << " edp=" << edp
     << " layout=" << LayoutName(layout);
  return os.str();
}

std::string_view DimName(ParallelDim dim) {
  switch (dim) {
    case ParallelDim::kTp:
      return "tp";
    case ParallelDim::kCp:
      return "cp";
    case ParallelDim::kDp:
      return "dp";
    case ParallelDim::kPp:
      return "pp";
    case ParallelDim::kEtp:
      return "etp";
    case ParallelDim::kEp:
      return "ep";
    case ParallelDim::kEdp:
      return "edp";
  }
  return "?";
}

const std::vector<RankGroup>& GroupSets::Attention(ParallelDim dim) const {
  auto it = attention.find(dim);
  if (it == attention.end()) {
    throw ValidationError("attention mesh has no dimension " +
                          std::string(DimName(dim)));
  }
  return it->second;
}

const std::vector<RankGroup>& GroupSets::Moe(ParallelDim dim) const {
  auto it = moe.find(dim);
  if (it == moe.end()) {
    throw ValidationError("moe mesh has no dimension " +
                          std::string(DimName(dim)));
  }
  return it->second;
}

const RankGroup& GroupSets::MoeGroupOf(ParallelDim dim, int rank) const {
  return GroupContaining(Moe(dim), rank);
}

const RankGroup& GroupSets::AttentionGroupOf(ParallelDim dim, int rank) const {
  return GroupContaining(Attention(dim), rank);
}

AttentionCoord AttentionCoordOf(const ParallelTopology& topology, int rank) {
  const AttentionAxes ax = AttentionAxesFor(topology.layout);
  const std::vector<int> c = AttentionMesh(topology).Coords(rank);
  return {c[ax.dp], c[ax.pp], c[ax.cp], c[ax.tp]};
}

MoeCoord MoeCoordOf(const ParallelTopology& topology, int rank) {
  const MoeAxes ax = MoeAxesFor(topology.layout);
  const std::vector<int> c = MoeMesh(topology).Coords(rank);
  return {c[ax.edp], c[ax.pp], c[ax.ep], c[ax.etp]};
}

std::vector<RankGroup> SequenceGroups(const ParallelTopology& topology) {
  topology.Validate();
  // cp and tp are the two innermost axes in both layouts, so each (dp, pp)
  // block is a contiguous run of tp*cp ranks ordered by (cp, tp).
  const int block = topology.tp * topology.cp;
  std::vector<RankGroup> groups;
  for (int start = 0; start < topology.world_size; start += block) {
    RankGroup g(block);
    for (int i = 0; i < block; ++i) g[i] = start + i;
    groups.push_back(std::move(g));
  }
  return groups;
}

GroupSets GenerateParallelGroups(const ParallelTopology& topology) {
  topology.Validate();
  const Mesh attn = AttentionMesh(topology);
  const Mesh moe = MoeMesh(topology);
  const AttentionAxes aa = AttentionAxesFor(topology.layout);
  const MoeAxes ma = MoeAxesFor(topology.layout);

  GroupSets out;
  out.attention[ParallelDim::kTp] = attn.GroupsAlong(aa.tp);
  out.attention[ParallelDim::kCp] = attn.GroupsAlong(aa.cp);
  out.attention[ParallelDim::kPp] = attn.GroupsAlong(aa.pp);
  out.attention[ParallelDim::kDp] = attn.GroupsAlong(aa.dp);
  out.moe[ParallelDim::kEtp] = moe.GroupsAlong(ma.etp);
  out.moe[ParallelDim::kEp] = moe.GroupsAlong(ma.ep);
  out.moe[ParallelDim::kPp] = moe.GroupsAlong(ma.pp);
  out.moe[ParallelDim::kEdp] = moe.GroupsAlong(ma.edp);
  return out;
}

GroupSets GenerateLegacyParallelGroups(const ParallelTopology& topology) {
  topology.Validate();
  const int dc = topology.dp * topology.cp;
  if (dc % topology.ep != 0) {
    throw ValidationError(
        "legacy layout needs ep=" + std::to_string(topology.ep) +
        " to divide dp*cp=" + std::to_string(dc));
  }
  if (topology.etp != 1 && topology.etp != topology.tp) {
    throw ValidationError("legacy layout needs etp to be 1 or equal to tp");
  }

  GroupSets out = GenerateParallelGroups(topology);
  std::map<std::array<int, 4>, RankGroup> ep_groups, etp_groups, edp_groups;
  for (int rank = 0; rank < topology.world_size; ++rank) {
    const AttentionCoord a = AttentionCoordOf(topology, rank);
    const int j = a.dp * topology.cp + a.cp;
    const int chunk = j / topology.ep;
    const int e = j % topology.ep;
    ep_groups[{a.pp, a.tp, chunk, 0}].push_back(rank);
    if (topology.etp == 1) {
      etp_groups[{rank, 0, 0, 0}].push_back(rank);
      edp_groups[{a.pp, e, 0, 0}].push_back(rank);
    } else {
      etp_groups[{a.pp, a.dp, a.cp, 0}].push_back(rank);
      edp_groups[{a.pp, e, a.tp, 0}].push_back(rank);
    }
  }
  auto flatten = [](std::map<std::array<int, 4>, RankGroup>& m) {
    std::vector<RankGroup> groups;
    for (auto& [key, g] : m) groups.push_back(std::move(g));
    SortGroups(groups);
    return groups;
  };
  out.moe[ParallelDim::kEp] = flatten(ep_groups);
  out.moe[ParallelDim::kEtp] = flatten(etp_groups);
  out.moe[ParallelDim::kEdp] = flatten(edp_groups);
  out.moe[ParallelDim::kPp] = out.attention[ParallelDim::kPp];
  return out;
}

PpConsistency CheckPpConsistency(const GroupSets& groups) {
  std::vector<RankGroup> attn = groups.Attention(ParallelDim::kPp);
  std::vector<RankGroup> moe = groups.Moe(ParallelDim::kPp);
  SortGroups(attn);
  SortGroups(moe);
  const std::set<RankGroup> moe_set(moe.begin(), moe.end());
  for (const RankGroup& g : attn) {
    if (!moe_set.contains(g)) {
      RankGroup partner;
      for (const RankGroup& m : moe) {
        if (std::find(m.begin(), m.end(), g.front()) != m.end()) partner = m;
      }
      return {false, std::make_pair(g, partner)};
    }
  }
  if (attn.size() != moe.size()) {
    return {false, std::make_pair(RankGroup{}, moe.back())};
  }
  return {true, std::nullopt};
}

void ClusterModel::Validate() const {
  if (node_size < 1) throw ValidationError("node_size must be >= 1");
  if (!(intra_bw > 0) || !(inter_bw > 0)) {
    throw ValidationError("bandwidths must be > 0");
  }
  if (inter_bw > intra_bw) {
    throw ValidationError("inter_bw must not exceed intra_bw");
  }
  if (!(per_link_latency_s >= 0)) {
    throw ValidationError("latency must be >= 0");
  }
  if (!(peak_flops > 0)) throw ValidationError("peak_flops must be > 0");
}

std::string_view SpanName(Span span) {
  return span == Span::kIntra ? "Intra" : "Inter";
}

SpanInfo ClassifyGroupSpan(std::span<const int> group,
                           const ClusterModel& cluster) {
  if (group.empty()) throw ValidationError("cannot classify an empty group");
  if (cluster.node_size < 1) throw ValidationError("node_size must be >= 1");
  std::set<int> nodes;
  for (int rank : group) {
    if (rank < 0) throw ValidationError("negative rank id in group");
    nodes.insert(rank / cluster.node_size);
  }
  const int count = static_cast<int>(nodes.size());
  return {count == 1 ? Span::kIntra : Span::kInter, count};
}

std::string FormatGroupSets(const GroupSets& groups) {
  std::ostringstream os;
  auto emit = [&os](std::string_view mesh,
                    const std::map<ParallelDim, std::vector<RankGroup>>& m) {
    for (const auto& [dim, list] : m) {
      std::vector<RankGroup> sorted = list;
      SortGroups(sorted);
      os << mesh << "." << DimName(dim) << " groups=" << sorted.size()
         << " size=" << (sorted.empty() ? 0 : sorted.front().size()) << ":";
      for (const RankGroup& g : sorted) os << " " << FormatGroup(g);
      os << "\n";
    }
  };
  emit("attention", groups.attention);
  emit("moe", groups.moe);
  return os.str();
}

}  // namespace foldsim
