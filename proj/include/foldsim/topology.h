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

#ifndef FOLDSIM_TOPOLOGY_H_
#define FOLDSIM_TOPOLOGY_H_

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace foldsim {

// Rank-index layout of the two meshes.
//
// kListing1 reshapes ranks as (dp, pp, cp, tp) for attention and
// (edp, pp, ep, etp) for MoE, slowest axis first. kPpOutermost moves pp to the
// slowest axis in both meshes, which makes the PP groups of the two meshes
// coincide for every valid degree tuple.
enum class LayoutOrder { kPpOutermost, kListing1 };

std::string_view LayoutName(LayoutOrder layout);
std::optional<LayoutOrder> ParseLayout(std::string_view name);

// Degrees of the attention mesh (TP x CP x DP x PP) and the MoE mesh
// (ETP x EP x EDP x PP) over the same set of ranks.
struct ParallelTopology {
  int world_size = 1;
  int tp = 1;
  int cp = 1;
  int pp = 1;
  int dp = 1;
  int etp = 1;
  int ep = 1;
  int edp = 1;
  LayoutOrder layout = LayoutOrder::kPpOutermost;

  // Derives dp and edp from the other degrees. Throws ValidationError naming
  // the failing product when a degree does not divide world_size.
  static ParallelTopology Create(
      int world_size, int tp, int cp, int ep, int etp, int pp,
      LayoutOrder layout = LayoutOrder::kPpOutermost);

  void Validate() const;

  // Ranks in one pipeline stage.
  int StageSize() const { return world_size / pp; }

  std::string ToString() const;

  friend bool operator==(const ParallelTopology&,
                         const ParallelTopology&) = default;
};

enum class ParallelDim { kTp, kCp, kDp, kPp, kEtp, kEp, kEdp };

std::string_view DimName(ParallelDim dim);

// An ordered list of rank ids. Members are ordered by their coordinate along
// the group's dimension, which is also ascending rank order.
using RankGroup = std::vector<int>;

struct GroupSets {
  // Keys: kTp, kCp, kDp, kPp.
  std::map<ParallelDim, std::vector<RankGroup>> attention;
  // Keys: kEtp, kEp, kEdp, kPp.
  std::map<ParallelDim, std::vector<RankGroup>> moe;

  const std::vector<RankGroup>& Attention(ParallelDim dim) const;
  const std::vector<RankGroup>& Moe(ParallelDim dim) const;

  // The group along `dim` that contains `rank`.
  const RankGroup& MoeGroupOf(ParallelDim dim, int rank) const;
  const RankGroup& AttentionGroupOf(ParallelDim dim, int rank) const;
};

// Coordinates of a rank in each mesh.
struct AttentionCoord {
  int dp = 0;
  int pp = 0;
  int cp = 0;
  int tp = 0;
};
struct MoeCoord {
  int edp = 0;
  int pp = 0;
  int ep = 0;
  int etp = 0;
};

AttentionCoord AttentionCoordOf(const ParallelTopology& topology, int rank);
MoeCoord MoeCoordOf(const ParallelTopology& topology, int rank);

// One group per (dp, pp) attention coordinate: the TP x CP ranks that together
// hold one set of sequences. Members are ordered by (cp, tp), which is the
// order of their shards along the sequence.
std::vector<RankGroup> SequenceGroups(const ParallelTopology& topology);

GroupSets GenerateParallelGroups(const ParallelTopology& topology);

// The pre-folding arrangement where EP groups are carved out of the attention
// DP x CP ranks at a fixed TP coordinate, and ETP is either 1 or the attention
// TP group. Attention groups are identical to GenerateParallelGroups.
GroupSets GenerateLegacyParallelGroups(const ParallelTopology& topology);

struct PpConsistency {
  bool consistent = true;
  // First attention PP group with no identical MoE PP group, paired with the
  // MoE PP group holding that group's first rank.
  std::optional<std::pair<RankGroup, RankGroup>> mismatch;
};

PpConsistency CheckPpConsistency(const GroupSets& groups);

// Physical cluster. Ranks are placed on nodes in contiguous blocks.
struct ClusterModel {
  int node_size = 8;
  double intra_bw = 450e9;        // bytes/s, NVLink class
  double inter_bw = 400e9 / 8.0;  // bytes/s, 400 Gb/s NIC
  double per_link_latency_s = 5e-6;
  double peak_flops = 989.5e12;  // per rank, dense BF16

  void Validate() const;
};

enum class Span { kIntra, kInter };

std::string_view SpanName(Span span);

struct SpanInfo {
  Span span = Span::kIntra;
  int node_count = 1;
};

SpanInfo ClassifyGroupSpan(std::span<const int> group,
                           const ClusterModel& cluster);

// Renders every group of both meshes, one line per dimension, groups sorted.
std::string FormatGroupSets(const GroupSets& groups);

}  // namespace foldsim

#endif  // FOLDSIM_TOPOLOGY_H_
