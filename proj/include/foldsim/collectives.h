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

#ifndef FOLDSIM_COLLECTIVES_H_
#define FOLDSIM_COLLECTIVES_H_

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "foldsim/topology.h"

namespace foldsim {

// A ragged block of rows. counts[i] rows belong to peer (or member) i and
// are stored back to back in `values`.
struct VarBuffer {
  std::vector<double> values;
  std::size_t row_width = 0;
  std::vector<std::size_t> counts;

  // A buffer whose rows all belong to one segment.
  static VarBuffer Dense(std::vector<double> values, std::size_t row_width);

  std::size_t rows() const;
  std::size_t total_count() const;
};

enum class Primitive {
  kAllToAllV,
  kAllGatherV,
  kReduceScatterV,
  kAllReduce,
  kPointToPoint,
};

std::string_view PrimitiveName(Primitive primitive);

struct LedgerEntry {
  std::string tag;
  Primitive primitive = Primitive::kAllToAllV;
  RankGroup group;
  // Indexed by group member. Bytes a rank sends to itself are not counted.
  std::vector<std::uint64_t> bytes_sent;
  std::vector<std::uint64_t> bytes_received;
};

// Simulated ranks plus the append-only traffic ledger.
//
// Collectives are called once per group with every member's contribution,
// which makes each call a rendezvous: it returns only when all inputs are
// present. Local compute between collectives runs through ForEachRank, which
// may use a pool of worker threads; results are written into per-rank slots so
// the observable outcome does not depend on the worker count.
class SimWorld {
 public:
  explicit SimWorld(int n_ranks, int workers = 1, int wire_elem_bytes = 8);

  int n_ranks() const { return n_ranks_; }
  int workers() const { return workers_; }
  int wire_elem_bytes() const { return wire_elem_bytes_; }
  const std::vector<LedgerEntry>& ledger() const { return ledger_; }

  // Runs fn(rank) for every rank. If several ranks throw, the exception of the
  // lowest rank is rethrown.
  void ForEachRank(const std::function<void(int)>& fn) const;

  void Record(LedgerEntry entry);

 private:
  int n_ranks_;
  int workers_;
  int wire_elem_bytes_;
  std::vector<LedgerEntry> ledger_;
};

// send[i] is member i's buffer with counts[j] rows addressed to member j.
// Result[j] holds, in ascending sender order, every row addressed to j, with
// counts[i] = rows received from member i.
std::vector<VarBuffer> AllToAllV(SimWorld& world, const RankGroup& group,
                                 std::span<const VarBuffer> send,
                                 std::string_view tag = "all_to_all_v");

struct GatheredBuffer {
  VarBuffer buffer;                  // counts[i] = rows contributed by member i
  std::vector<std::size_t> offsets;  // first row of member i's segment
};

// Every member receives the member-ordered concatenation of all inputs.
std::vector<GatheredBuffer> AllGatherV(SimWorld& world, const RankGroup& group,
                                       std::span<const VarBuffer> inputs,
                                       std::string_view tag = "all_gather_v");

// Element-wise sum of equal-shape partials in ascending member order; member i
// keeps rows [offset_i, offset_i + partition_rows[i]).
std::vector<VarBuffer> ReduceScatterV(
    SimWorld& world, const RankGroup& group,
    std::span<const VarBuffer> partials,
    std::span<const std::size_t> partition_rows,
    std::string_view tag = "reduce_scatter_v");

enum class ReduceOp { kSum, kAvg };

std::vector<std::vector<double>> AllReduce(
    SimWorld& world, const RankGroup& group,
    std::span<const std::vector<double>> buffers, ReduceOp op,
    std::string_view tag = "all_reduce");

// Elements member `member` sends in a ring all-reduce of `len` elements over
// `n` members: n-1 reduce-scatter steps plus n-1 all-gather steps, with the
// buffer cut into n chunks whose sizes differ by at most one.
std::uint64_t RingAllReduceSendElems(std::size_t len, int n, int member);

// Byte totals keyed by primitive, split by the span of the group that carried
// them.
struct TrafficStats {
  std::map<Primitive, std::array<std::uint64_t, 2>> bytes;

  std::uint64_t Bytes(Primitive primitive, Span span) const;
  std::uint64_t Total(Primitive primitive) const;
  std::uint64_t Total() const;
};

TrafficStats ComputeTrafficStats(const SimWorld& world,
                                 const ClusterModel& cluster);

}  // namespace foldsim

#endif  // FOLDSIM_COLLECTIVES_H_
