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

#include "foldsim/collectives.h"

#include <algorithm>
#include <exception>
#include <numeric>
#include <thread>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

std::string MemberLabel(const RankGroup& group, size_t member) {
  return "rank " + std::to_string(group[member]) + " (member " +
         std::to_string(member) + ")";
}

void CheckGroupInputs(const RankGroup& group, size_t inputs,
                      std::string_view what) {
  if (group.empty()) {
    throw ProtocolError(std::string(what) + ": empty group");
  }
  if (inputs != group.size()) {
    throw ProtocolError(std::string(what) + ": group has " +
                        std::to_string(group.size()) + " members but " +
                        std::to_string(inputs) + " contributions");
  }
}

void CheckConservation(const LedgerEntry& entry) {
  const auto sent = std::accumulate(entry.bytes_sent.begin(),
                                    entry.bytes_sent.end(), std::uint64_t{0});
  const auto recv =
      std::accumulate(entry.bytes_received.begin(), entry.bytes_received.end(),
                      std::uint64_t{0});
  if (sent != recv) {
    throw InvariantError(entry.tag + ": sent " + std::to_string(sent) +
                         " bytes but received " + std::to_string(recv));
  }
}

size_t RowsOf(const VarBuffer& b, const RankGroup& group, size_t member,
              std::string_view what) {
  if (b.row_width == 0) {
    throw ProtocolError(std::string(what) + ": " + MemberLabel(group, member) +
                        " has zero row width");
  }
  if (b.values.size() % b.row_width != 0) {
    throw ProtocolError(std::string(what) + ": " + MemberLabel(group, member) +
                        " has a buffer that is not a whole number of rows");
  }
  return b.values.size() / b.row_width;
}

}  // namespace

VarBuffer VarBuffer::Dense(std::vector<double> values, std::size_t row_width) {
  VarBuffer b;
  b.row_width = row_width;
  const size_t rows = row_width == 0 ? 0 : values.size() / row_width;
  b.values = std::move(values);
  b.counts = {rows};
  return b;
}

std::size_t VarBuffer::rows() const {
  return row_width == 0 ? 0 : values.size() / row_width;
}

std::size_t VarBuffer::total_count() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::string_view PrimitiveName(Primitive primitive) {
  switch (primitive) {
    case Primitive::kAllToAllV:
      return "all_to_all_v";
    case Primitive::kAllGatherV:
      return "all_gather_v";
    case Primitive::kReduceScatterV:
      return "reduce_scatter_v";
    case Primitive::kAllReduce:
      return "all_reduce";
    case Primitive::kPointToPoint:
      return "p2p";
  }
  return "?";
}

SimWorld::SimWorld(int n_ranks, int workers, int wire_elem_bytes)
    : n_ranks_(n_ranks), workers_(workers), wire_elem_bytes_(wire_elem_bytes) {
  if (n_ranks < 1) throw ValidationError("SimWorld needs at least one rank");
  if (workers < 1) throw ValidationError("workers must be >= 1");
  if (wire_elem_bytes < 1) {
    throw ValidationError("wire_elem_bytes must be >= 1");
  }
}

void SimWorld::ForEachRank(const std::function<void(int)>& fn) const {
  std::vector<std::exception_ptr> errors(n_ranks_);
  auto run = [&](int rank) {
    try {
      fn(rank);
    } catch (...) {
      errors[rank] = std::current_exception();
    }
  };
  const int threads = std::min(workers_, n_ranks_);
  if (threads <= 1) {
    for (int r = 0; r < n_ranks_; ++r) run(r);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (int r = w; r < n_ranks_; r += threads) run(r);
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void SimWorld::Record(LedgerEntry entry) {
  ledger_.push_back(std::move(entry));
}

std::vector<VarBuffer> AllToAllV(SimWorld& world, const RankGroup& group,
                                 std::span<const VarBuffer> send,
                                 std::string_view tag) {
  CheckGroupInputs(group, send.size(), "all_to_all_v");
  const size_t n = group.size();
  const size_t width = send[0].row_width;
  for (size_t i = 0; i < n; ++i) {
    const VarBuffer& b = send[i];
    if (b.row_width != width) {
      throw ProtocolError("all_to_all_v: " + MemberLabel(group, i) +
                          " row width " + std::to_string(b.row_width) +
                          " != " + std::to_string(width));
    }
    if (b.counts.size() != n) {
      throw ProtocolError("all_to_all_v: " + MemberLabel(group, i) +
                          " supplies " + std::to_string(b.counts.size()) +
                          " counts for " + std::to_string(n) + " peers");
    }
    if (b.values.size() != width * b.total_count()) {
      throw ProtocolError("all_to_all_v: " + MemberLabel(group, i) +
                          " buffer length " + std::to_string(b.values.size()) +
                          " != row_width * sum(counts) = " +
                          std::to_string(width * b.total_count()));
    }
  }

  const auto elem = static_cast<std::uint64_t>(world.wire_elem_bytes());
  LedgerEntry entry{std::string(tag), Primitive::kAllToAllV, group,
                    std::vector<std::uint64_t>(n, 0),
                    std::vector<std::uint64_t>(n, 0)};
  std::vector<VarBuffer> recv(n);
  for (size_t j = 0; j < n; ++j) {
    recv[j].row_width = width;
    recv[j].counts.assign(n, 0);
  }
  for (size_t i = 0; i < n; ++i) {
    size_t offset = 0;
    for (size_t j = 0; j < n; ++j) {
      const size_t rows = send[i].counts[j];
      const auto begin = send[i].values.begin() + offset * width;
      recv[j].values.insert(recv[j].values.end(), begin, begin + rows * width);
      recv[j].counts[i] = rows;
      offset += rows;
      if (i != j) {
        entry.bytes_sent[i] += rows * width * elem;
        entry.bytes_received[j] += rows * width * elem;
      }
    }
  }
  CheckConservation(entry);
  world.Record(std::move(entry));
  return recv;
}

std::vector<GatheredBuffer> AllGatherV(SimWorld& world, const RankGroup& group,
                                       std::span<const VarBuffer> inputs,
                                       std::string_view tag) {
  CheckGroupInputs(group, inputs.size(), "all_gather_v");
  const size_t n = group.size();
  const size_t width = inputs[0].row_width;
  GatheredBuffer gathered;
  gathered.buffer.row_width = width;
  for (size_t i = 0; i < n; ++i) {
    if (inputs[i].row_width != width) {
      throw ProtocolError("all_gather_v: " + MemberLabel(group, i) +
                          " row width " + std::to_string(inputs[i].row_width) +
                          " != " + std::to_string(width));
    }
    const size_t rows = RowsOf(inputs[i], group, i, "all_gather_v");
    gathered.offsets.push_back(gathered.buffer.rows());
    gathered.buffer.counts.push_back(rows);
    gathered.buffer.values.insert(gathered.buffer.values.end(),
                                  inputs[i].values.begin(),
                                  inputs[i].values.end());
  }

  const auto elem = static_cast<std::uint64_t>(world.wire_elem_bytes());
  LedgerEntry entry{std::string(tag), Primitive::kAllGatherV, group,
                    std::vector<std::uint64_t>(n, 0),
                    std::vector<std::uint64_t>(n, 0)};
  const size_t total = gathered.buffer.rows();
  for (size_t i = 0; i < n; ++i) {
    const size_t own = gathered.buffer.counts[i];
    entry.bytes_sent[i] = own * width * elem * (n - 1);
    entry.bytes_received[i] = (total - own) * width * elem;
  }
  CheckConservation(entry);
  world.Record(std::move(entry));
  return std::vector<GatheredBuffer>(n, gathered);
}

std::vector<VarBuffer> ReduceScatterV(
    SimWorld& world, const RankGroup& group,
    std::span<const VarBuffer> partials,
    std::span<const std::size_t> partition_rows, std::string_view tag) {
  CheckGroupInputs(group, partials.size(), "reduce_scatter_v");
  const size_t n = group.size();
  if (partition_rows.size() != n) {
    throw ProtocolError(
        "reduce_scatter_v: " + std::to_string(partition_rows.size()) +
        " partitions for " + std::to_string(n) + " members");
  }
  const size_t width = partials[0].row_width;
  const size_t rows = RowsOf(partials[0], group, 0, "reduce_scatter_v");
  for (size_t i = 1; i < n; ++i) {
    if (partials[i].row_width != width ||
        partials[i].values.size() != partials[0].values.size()) {
      throw ProtocolError("reduce_scatter_v: " + MemberLabel(group, i) +
                          " partial shape differs from member 0");
    }
  }
  const size_t partition_sum =
      std::accumulate(partition_rows.begin(), partition_rows.end(), size_t{0});
  if (partition_sum != rows) {
    throw ProtocolError("reduce_scatter_v: partition sizes sum to " +
                        std::to_string(partition_sum) + " but buffers hold " +
                        std::to_string(rows) + " rows");
  }

  std::vector<double> sum = partials[0].values;
  for (size_t i = 1; i < n; ++i) {
    const std::vector<double>& p = partials[i].values;
    for (size_t e = 0; e < sum.size(); ++e) sum[e] += p[e];
  }

  const auto elem = static_cast<std::uint64_t>(world.wire_elem_bytes());
  LedgerEntry entry{std::string(tag), Primitive::kReduceScatterV, group,
                    std::vector<std::uint64_t>(n, 0),
                    std::vector<std::uint64_t>(n, 0)};
  std::vector<VarBuffer> out(n);
  size_t offset = 0;
  for (size_t i = 0; i < n; ++i) {
    const size_t part = partition_rows[i];
    out[i].row_width = width;
    out[i].counts = {part};
    out[i].values.assign(sum.begin() + offset * width,
                         sum.begin() + (offset + part) * width);
    offset += part;
    entry.bytes_sent[i] = (rows - part) * width * elem;
    entry.bytes_received[i] = part * width * elem * (n - 1);
  }
  CheckConservation(entry);
  world.Record(std::move(entry));
  return out;
}

std::uint64_t RingAllReduceSendElems(std::size_t len, int n, int member) {
  if (n <= 1) return 0;
  auto chunk = [&](int c) -> std::uint64_t {
    return len / n + (static_cast<size_t>(c) < len % n ? 1 : 0);
  };
  // Reduce-scatter skips chunk member+1, all-gather skips chunk member+2.
  return 2 * static_cast<std::uint64_t>(len) - chunk((member + 1) % n) -
         chunk((member + 2) % n);
}

std::vector<std::vector<double>> AllReduce(
    SimWorld& world, const RankGroup& group,
    std::span<const std::vector<double>> buffers, ReduceOp op,
    std::string_view tag) {
  CheckGroupInputs(group, buffers.size(), "all_reduce");
  const size_t n = group.size();
  for (size_t i = 1; i < n; ++i) {
    if (buffers[i].size() != buffers[0].size()) {
      throw ProtocolError("all_reduce: " + MemberLabel(group, i) + " length " +
                          std::to_string(buffers[i].size()) +
                          " != " + std::to_string(buffers[0].size()));
    }
  }
  std::vector<double> acc = buffers[0];
  for (size_t i = 1; i < n; ++i) {
    for (size_t e = 0; e < acc.size(); ++e) acc[e] += buffers[i][e];
  }
  if (op == ReduceOp::kAvg) {
    for (double& v : acc) v /= static_cast<double>(n);
  }

  const auto elem = static_cast<std::uint64_t>(world.wire_elem_bytes());
  const int members = static_cast<int>(n);
  LedgerEntry entry{std::string(tag), Primitive::kAllReduce, group,
                    std::vector<std::uint64_t>(n, 0),
                    std::vector<std::uint64_t>(n, 0)};
  for (int i = 0; i < members; ++i) {
    const auto sent = RingAllReduceSendElems(acc.size(), members, i) * elem;
    entry.bytes_sent[i] = sent;
    entry.bytes_received[(i + 1) % members] = sent;
  }
  CheckConservation(entry);
  world.Record(std::move(entry));
  return std::vector<std::vector<double>>(n, acc);
}

std::uint64_t TrafficStats::Bytes(Primitive primitive, Span span) const {
  auto it = bytes.find(primitive);
  if (it == bytes.end()) return 0;
  return it->second[span == Span::kIntra ? 0 : 1];
}

std::uint64_t TrafficStats::Total(Primitive primitive) const {
  return Bytes(primitive, Span::kIntra) + Bytes(primitive, Span::kInter);
}

std::uint64_t TrafficStats::Total() const {
  std::uint64_t total = 0;
  for (const auto& [p, b] : bytes) total += b[0] + b[1];
  return total;
}

TrafficStats ComputeTrafficStats(const SimWorld& world,
                                 const ClusterModel& cluster) {
  TrafficStats stats;
  for (const LedgerEntry& e : world.ledger()) {
    const SpanInfo span = ClassifyGroupSpan(e.group, cluster);
    const std::uint64_t sent = std::accumulate(
        e.bytes_sent.begin(), e.bytes_sent.end(), std::uint64_t{0});
    stats.bytes[e.primitive][span.span == Span::kIntra ? 0 : 1] += sent;
  }
  return stats;
}

}  // namespace foldsim
