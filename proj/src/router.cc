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

#include "foldsim/router.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "foldsim/errors.h"

namespace foldsim {

std::string_view GateFnName(GateFn fn) {
  return fn == GateFn::kSoftmax ? "softmax" : "sigmoid";
}

std::string_view DropModeName(DropMode mode) {
  return mode == DropMode::kSubSequence ? "sub-sequence" : "full-sequence";
}

std::string_view DropPriorityName(DropPriority priority) {
  return priority == DropPriority::kPosition ? "position" : "probability";
}

void GatingParams::Validate() const {
  if (gate_weights.size() == 0) {
    throw ValidationError("gate weights are empty");
  }
  if (top_k < 1 || top_k > num_experts()) {
    throw ValidationError(
        "top_k=" + std::to_string(top_k) +
        " must lie in [1, num_experts=" + std::to_string(num_experts()) + "]");
  }
  if (capacity_factor && !(*capacity_factor >= 1.0)) {
    throw ValidationError("capacity_factor must be >= 1 (got " +
                          std::to_string(*capacity_factor) + ")");
  }
}

std::size_t RoutingDecision::kept_pairs() const {
  std::size_t kept = 0;
  for (const TokenRoute& t : tokens) {
    for (const ExpertChoice& c : t.choices) kept += c.kept ? 1 : 0;
  }
  return kept;
}

Matrix InitGateWeights(int hidden, int num_experts, std::uint64_t seed) {
  auto engine = MakeEngine(seed, RandomStream::kGateWeights);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  return UniformMatrix(engine, hidden, num_experts, -bound, bound);
}

RoutingDecision ComputeGates(const Matrix& tokens,
                             std::span<const std::int64_t> positions,
                             const GatingParams& params) {
  params.Validate();
  if (tokens.cols() != params.hidden()) {
    throw ValidationError("token width " + std::to_string(tokens.cols()) +
                          " != gate weight rows " +
                          std::to_string(params.hidden()));
  }
  if (positions.size() != static_cast<size_t>(tokens.rows())) {
    throw ValidationError("positions do not cover every token");
  }
  if (!tokens.allFinite()) {
    throw NumericError("router input contains non-finite values");
  }

  const int num_experts = params.num_experts();
  const Eigen::Index hidden = tokens.cols();
  RoutingDecision decision;
  decision.num_experts = num_experts;
  decision.scores.resize(tokens.rows(), num_experts);
  decision.tokens.resize(tokens.rows());

  std::vector<double> logits(num_experts);
  std::vector<int> order(num_experts);
  for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
    // Fixed accumulation order keeps the scores of a token independent of
    // which block it was computed in.
    for (int e = 0; e < num_experts; ++e) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < hidden; ++j) {
        acc += tokens(t, j) * params.gate_weights(j, e);
      }
      logits[e] = acc;
    }
    if (params.gate_fn == GateFn::kSoftmax) {
      const double peak = *std::max_element(logits.begin(), logits.end());
      double denom = 0.0;
      for (int e = 0; e < num_experts; ++e) denom += std::exp(logits[e] - peak);
      for (int e = 0; e < num_experts; ++e) {
        decision.scores(t, e) = std::exp(logits[e] - peak) / denom;
      }
    } else {
      for (int e = 0; e < num_experts; ++e) {
        decision.scores(t, e) = 1.0 / (1.0 + std::exp(-logits[e]));
      }
    }

    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + params.top_k, order.end(),
                      [&](int a, int b) {
                        const double sa = decision.scores(t, a);
                        const double sb = decision.scores(t, b);
                        return sa != sb ? sa > sb : a < b;
                      });
    TokenRoute& route = decision.tokens[t];
    route.position = positions[t];
    double selected = 0.0;
    for (int i = 0; i < params.top_k; ++i) {
      selected += decision.scores(t, order[i]);
    }
    for (int i = 0; i < params.top_k; ++i) {
      double gate = decision.scores(t, order[i]);
      if (params.renormalize_topk) gate /= selected;
      route.choices.push_back({order[i], gate, true});
    }
  }
  return decision;
}

int ExpertCapacity(double capacity_factor, std::size_t scope_tokens,
                   int num_experts) {
  if (!(capacity_factor >= 1.0)) {
    throw ValidationError("capacity_factor must be >= 1");
  }
  if (num_experts < 1) throw ValidationError("num_experts must be >= 1");
  const double raw = capacity_factor * static_cast<double>(scope_tokens) /
                     static_cast<double>(num_experts);
  return std::max(1, static_cast<int>(std::floor(raw)));
}

RoutingDecision ApplyCapacity(RoutingDecision decision,
                              std::size_t scope_tokens,
                              const GatingParams& params) {
  if (params.dropless()) return decision;
  const int capacity = ExpertCapacity(*params.capacity_factor, scope_tokens,
                                      decision.num_experts);

  struct Pair {
    std::size_t token;
    std::size_t choice;
  };
  std::vector<std::vector<Pair>> per_expert(decision.num_experts);
  for (std::size_t t = 0; t < decision.tokens.size(); ++t) {
    const TokenRoute& route = decision.tokens[t];
    for (std::size_t c = 0; c < route.choices.size(); ++c) {
      const ExpertChoice& choice = route.choices[c];
      if (choice.expert < 0 || choice.expert >= decision.num_experts) {
        throw ValidationError("expert id " + std::to_string(choice.expert) +
                              " out of range");
      }
      if (choice.kept) per_expert[choice.expert].push_back({t, c});
    }
  }

  auto position_of = [&](const Pair& p) {
    return decision.tokens[p.token].position;
  };
  auto gate_of = [&](const Pair& p) {
    return decision.tokens[p.token].choices[p.choice].gate;
  };
  for (std::vector<Pair>& pairs : per_expert) {
    if (params.drop_priority == DropPriority::kPosition) {
      std::stable_sort(pairs.begin(), pairs.end(),
                       [&](const Pair& a, const Pair& b) {
                         return position_of(a) < position_of(b);
                       });
    } else {
      std::stable_sort(pairs.begin(), pairs.end(),
                       [&](const Pair& a, const Pair& b) {
                         if (gate_of(a) != gate_of(b)) {
                           return gate_of(a) > gate_of(b);
                         }
                         return position_of(a) < position_of(b);
                       });
    }
    for (std::size_t i = static_cast<std::size_t>(capacity); i < pairs.size();
         ++i) {
      decision.tokens[pairs[i].token].choices[pairs[i].choice].kept = false;
    }
  }
  return decision;
}

std::vector<RoutingDecision> GatherFullSequenceDecision(
    SimWorld& world, const RankGroup& sequence_group,
    std::span<const RoutingDecision> local, const GatingParams& params) {
  if (local.size() != sequence_group.size()) {
    throw ProtocolError(
        "full-sequence gather: " + std::to_string(local.size()) +
        " decisions for " + std::to_string(sequence_group.size()) + " members");
  }
  const std::size_t k = static_cast<std::size_t>(params.top_k);
  const std::size_t width = 1 + 2 * k;
  const std::size_t shard = local[0].tokens.size();

  std::vector<VarBuffer> rows(local.size());
  for (std::size_t m = 0; m < local.size(); ++m) {
    if (local[m].tokens.size() != shard) {
      throw ProtocolError(
          "full-sequence gather: rank " + std::to_string(sequence_group[m]) +
          " holds " + std::to_string(local[m].tokens.size()) +
          " tokens but rank " + std::to_string(sequence_group[0]) + " holds " +
          std::to_string(shard));
    }
    std::vector<double> values;
    values.reserve(shard * width);
    for (const TokenRoute& t : local[m].tokens) {
      if (t.choices.size() != k) {
        throw ProtocolError(
            "full-sequence gather: rank " + std::to_string(sequence_group[m]) +
            " routes a token to " + std::to_string(t.choices.size()) +
            " experts, expected " + std::to_string(k));
      }
      values.push_back(static_cast<double>(t.position));
      for (const ExpertChoice& c : t.choices) {
        values.push_back(static_cast<double>(c.expert));
        values.push_back(c.gate);
      }
    }
    rows[m] = VarBuffer::Dense(std::move(values), width);
  }

  const std::vector<GatheredBuffer> gathered =
      AllGatherV(world, sequence_group, rows, "route_gather");

  // Every member now holds the same rows; decode once.
  const VarBuffer& all = gathered[0].buffer;
  RoutingDecision merged;
  merged.num_experts = params.num_experts();
  for (std::size_t r = 0; r < all.rows(); ++r) {
    const double* row = all.values.data() + r * width;
    TokenRoute t;
    t.position = static_cast<std::int64_t>(row[0]);
    for (std::size_t c = 0; c < k; ++c) {
      t.choices.push_back(
          {static_cast<int>(row[1 + 2 * c]), row[2 + 2 * c], true});
    }
    merged.tokens.push_back(std::move(t));
  }
  std::stable_sort(merged.tokens.begin(), merged.tokens.end(),
                   [](const TokenRoute& a, const TokenRoute& b) {
                     return a.position < b.position;
                   });
  const std::size_t scope = merged.tokens.size();
  merged = ApplyCapacity(std::move(merged), scope, params);

  std::map<std::int64_t, const TokenRoute*> by_position;
  for (const TokenRoute& t : merged.tokens) by_position[t.position] = &t;

  std::vector<RoutingDecision> out(local.begin(), local.end());
  for (RoutingDecision& d : out) {
    for (TokenRoute& t : d.tokens) {
      const TokenRoute* global = by_position.at(t.position);
      for (std::size_t c = 0; c < k; ++c) {
        t.choices[c].kept = global->choices[c].kept;
      }
    }
  }
  return out;
}

LoadStats ComputeLoadStats(const RoutingDecision& decision, int num_experts) {
  LoadStats stats;
  stats.counts.assign(num_experts, 0);
  std::vector<double> top1(num_experts, 0.0);
  for (const TokenRoute& t : decision.tokens) {
    for (const ExpertChoice& c : t.choices) {
      if (c.kept) ++stats.counts.at(c.expert);
    }
    if (!t.choices.empty()) top1.at(t.choices.front().expert) += 1.0;
  }
  const std::size_t total =
      std::accumulate(stats.counts.begin(), stats.counts.end(), std::size_t{0});
  if (total > 0) {
    const double mean =
        static_cast<double>(total) / static_cast<double>(num_experts);
    const auto peak =
        *std::max_element(stats.counts.begin(), stats.counts.end());
    stats.imbalance = static_cast<double>(peak) / mean;
  }
  const auto n_tokens = static_cast<double>(decision.tokens.size());
  if (n_tokens > 0 &&
      decision.scores.rows() ==
          static_cast<Eigen::Index>(decision.tokens.size()) &&
      decision.scores.cols() == num_experts) {
    double loss = 0.0;
    for (int e = 0; e < num_experts; ++e) {
      const double f = top1[e] / n_tokens;
      const double p = decision.scores.col(e).sum() / n_tokens;
      loss += f * p;
    }
    stats.aux_loss = num_experts * loss;
  }
  return stats;
}

Matrix GateLogitGradient(const RoutingDecision& decision,
                         const GatingParams& params,
                         const std::vector<std::vector<double>>& gate_grads) {
  const auto n = static_cast<Eigen::Index>(decision.tokens.size());
  const int num_experts = decision.num_experts;
  if (decision.scores.rows() != n || decision.scores.cols() != num_experts) {
    throw ValidationError("gate gradient needs the router scores");
  }
  if (gate_grads.size() != decision.tokens.size()) {
    throw ValidationError("gate gradient count does not match tokens");
  }
  Matrix d_logits = Matrix::Zero(n, num_experts);
  std::vector<double> d_scores(num_experts);
  for (Eigen::Index t = 0; t < n; ++t) {
    const TokenRoute& route = decision.tokens[t];
    const std::vector<double>& dg = gate_grads[t];
    if (dg.size() != route.choices.size()) {
      throw ValidationError("gate gradient width does not match top_k");
    }
    std::fill(d_scores.begin(), d_scores.end(), 0.0);
    if (params.renormalize_topk) {
      // g_i = s_i / S over the selected experts.
      double selected = 0.0;
      double weighted = 0.0;
      for (std::size_t c = 0; c < route.choices.size(); ++c) {
        const double s = decision.scores(t, route.choices[c].expert);
        selected += s;
        weighted += dg[c] * s;
      }
      for (std::size_t c = 0; c < route.choices.size(); ++c) {
        d_scores[route.choices[c].expert] =
            dg[c] / selected - weighted / (selected * selected);
      }
    } else {
      for (std::size_t c = 0; c < route.choices.size(); ++c) {
        d_scores[route.choices[c].expert] = dg[c];
      }
    }
    if (params.gate_fn == GateFn::kSoftmax) {
      double dot = 0.0;
      for (int e = 0; e < num_experts; ++e) {
        dot += decision.scores(t, e) * d_scores[e];
      }
      for (int e = 0; e < num_experts; ++e) {
        d_logits(t, e) = decision.scores(t, e) * (d_scores[e] - dot);
      }
    } else {
      for (int e = 0; e < num_experts; ++e) {
        const double s = decision.scores(t, e);
        d_logits(t, e) = d_scores[e] * s * (1.0 - s);
      }
    }
  }
  return d_logits;
}

}  // namespace foldsim
