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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

std::vector<std::int64_t> Iota(std::size_t n, std::int64_t start = 0) {
  std::vector<std::int64_t> p(n);
  std::iota(p.begin(), p.end(), start);
  return p;
}

GatingParams Params(Matrix w, int k) {
  GatingParams p;
  p.gate_weights = std::move(w);
  p.top_k = k;
  return p;
}

RoutingDecision AllToExpert(int expert, int num_experts, std::size_t tokens) {
  RoutingDecision d;
  d.num_experts = num_experts;
  for (std::size_t t = 0; t < tokens; ++t) {
    d.tokens.push_back({static_cast<std::int64_t>(t), {{expert, 0.5, true}}});
  }
  return d;
}

TEST(ComputeGatesTest, SingleExpertTakesEverything) {
  const GatingParams p = Params(Matrix::Constant(3, 1, 0.7), 1);
  auto engine = MakeEngine(1, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 5, 3, -1, 1);
  const RoutingDecision d = ComputeGates(x, Iota(5), p);
  for (const TokenRoute& t : d.tokens) {
    ASSERT_EQ(t.choices.size(), 1u);
    EXPECT_EQ(t.choices[0].expert, 0);
    EXPECT_EQ(t.choices[0].gate, 1.0);
  }
}

TEST(ComputeGatesTest, TwoLogitSoftmaxClosedForm) {
  Matrix w(1, 2);
  w << 2.0, 0.0;
  const Matrix x = Matrix::Constant(1, 1, 1.0);
  const RoutingDecision d = ComputeGates(x, Iota(1), Params(w, 1));
  EXPECT_EQ(d.tokens[0].choices[0].expert, 0);
  EXPECT_NEAR(d.tokens[0].choices[0].gate, std::exp(2.0) / (std::exp(2.0) + 1),
              1e-15);
  EXPECT_NEAR(d.tokens[0].choices[0].gate, 0.880797, 1e-6);
}

TEST(ComputeGatesTest, FullSupportGatesSumToOne) {
  auto engine = MakeEngine(2, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 6, 4, -1, 1);
  const GatingParams p = Params(InitGateWeights(4, 2, 9), 2);
  for (const TokenRoute& t : ComputeGates(x, Iota(6), p).tokens) {
    EXPECT_NEAR(t.choices[0].gate + t.choices[1].gate, 1.0, 1e-15);
  }
}

TEST(ComputeGatesTest, TiesGoToTheLowerExpert) {
  const GatingParams p = Params(Matrix::Zero(2, 4), 2);
  const Matrix x = Matrix::Ones(1, 2);
  const RoutingDecision d = ComputeGates(x, Iota(1), p);
  EXPECT_EQ(d.tokens[0].choices[0].expert, 0);
  EXPECT_EQ(d.tokens[0].choices[1].expert, 1);
}

TEST(ComputeGatesTest, RenormalizedTopKSumsToOne) {
  GatingParams p = Params(InitGateWeights(4, 8, 3), 3);
  p.renormalize_topk = true;
  auto engine = MakeEngine(3, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 10, 4, -1, 1);
  for (const TokenRoute& t : ComputeGates(x, Iota(10), p).tokens) {
    double sum = 0.0;
    for (const ExpertChoice& c : t.choices) sum += c.gate;
    EXPECT_NEAR(sum, 1.0, 1e-15);
  }
}

TEST(ComputeGatesTest, SigmoidScoresAreIndependent) {
  Matrix w(1, 2);
  w << 1.0, -1.0;
  GatingParams p = Params(w, 2);
  p.gate_fn = GateFn::kSigmoid;
  const RoutingDecision d = ComputeGates(Matrix::Ones(1, 1), Iota(1), p);
  EXPECT_NEAR(d.tokens[0].choices[0].gate, 1 / (1 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(d.tokens[0].choices[1].gate, 1 / (1 + std::exp(1.0)), 1e-15);
}

TEST(ComputeGatesTest, SelectionIsShiftInvariant) {
  // Adding a constant column to W_g shifts every logit of a token by the
  // same amount when the token has a constant 1 feature.
  auto engine = MakeEngine(4, RandomStream::kTokens);
  Matrix x = UniformMatrix(engine, 20, 3, -1, 1);
  x.col(2).setOnes();
  Matrix w = InitGateWeights(3, 6, 4);
  const RoutingDecision a = ComputeGates(x, Iota(20), Params(w, 2));
  w.row(2).array() += 5.0;
  const RoutingDecision b = ComputeGates(x, Iota(20), Params(w, 2));
  for (std::size_t t = 0; t < 20; ++t) {
    for (int c = 0; c < 2; ++c) {
      EXPECT_EQ(a.tokens[t].choices[c].expert, b.tokens[t].choices[c].expert);
    }
  }
}

TEST(ComputeGatesTest, RowScoresDoNotDependOnTheBlock) {
  auto engine = MakeEngine(5, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 8, 5, -1, 1);
  const GatingParams p = Params(InitGateWeights(5, 4, 5), 2);
  const RoutingDecision whole = ComputeGates(x, Iota(8), p);
  const RoutingDecision tail = ComputeGates(x.bottomRows(3), Iota(3, 5), p);
  for (int t = 0; t < 3; ++t) {
    for (int e = 0; e < 4; ++e) {
      EXPECT_EQ(whole.scores(5 + t, e), tail.scores(t, e));
    }
  }
}

TEST(ComputeGatesTest, RejectsBadInput) {
  const GatingParams p = Params(Matrix::Zero(2, 2), 1);
  Matrix x = Matrix::Zero(1, 2);
  x(0, 1) = std::nan("");
  EXPECT_THROW(ComputeGates(x, Iota(1), p), NumericError);
  EXPECT_THROW(ComputeGates(Matrix::Zero(1, 3), Iota(1), p), ValidationError);
  EXPECT_THROW(ComputeGates(Matrix::Zero(1, 2), Iota(2), p), ValidationError);
  EXPECT_THROW(
      ComputeGates(Matrix::Zero(1, 2), Iota(1), Params(p.gate_weights, 3)),
      ValidationError);
}

TEST(ExpertCapacityTest, FloorWithMinimumOne) {
  EXPECT_EQ(ExpertCapacity(1.0, 8, 4), 2);
  EXPECT_EQ(ExpertCapacity(1.5, 8, 4), 3);
  EXPECT_EQ(ExpertCapacity(1.0, 3, 4), 1);
  EXPECT_THROW(ExpertCapacity(0.5, 8, 4), ValidationError);
}

TEST(ApplyCapacityTest, DroplessLeavesDecisionAlone) {
  const RoutingDecision d = AllToExpert(0, 4, 10);
  const GatingParams p = Params(Matrix::Zero(1, 4), 1);
  EXPECT_EQ(ApplyCapacity(d, 10, p).kept_pairs(), 10u);
}

TEST(ApplyCapacityTest, PositionPriorityDropsTheLatestToken) {
  RoutingDecision d = AllToExpert(0, 3, 3);
  GatingParams p = Params(Matrix::Zero(1, 3), 1);
  p.capacity_factor = 2.0;  // floor(2 * 3 / 3) = 2
  const RoutingDecision out = ApplyCapacity(d, 3, p);
  EXPECT_TRUE(out.tokens[0].choices[0].kept);
  EXPECT_TRUE(out.tokens[1].choices[0].kept);
  EXPECT_FALSE(out.tokens[2].choices[0].kept);
}

TEST(ApplyCapacityTest, ProbabilityPriorityKeepsTheHighestGates) {
  RoutingDecision d = AllToExpert(0, 3, 3);
  d.tokens[0].choices[0].gate = 0.1;
  d.tokens[1].choices[0].gate = 0.9;
  d.tokens[2].choices[0].gate = 0.9;
  GatingParams p = Params(Matrix::Zero(1, 3), 1);
  p.capacity_factor = 2.0;
  p.drop_priority = DropPriority::kProbability;
  const RoutingDecision out = ApplyCapacity(d, 3, p);
  EXPECT_FALSE(out.tokens[0].choices[0].kept);
  EXPECT_TRUE(out.tokens[1].choices[0].kept);
  EXPECT_TRUE(out.tokens[2].choices[0].kept);
}

TEST(ApplyCapacityTest, LargerCapacityNeverDropsMore) {
  auto engine = MakeEngine(6, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 40, 4, -1, 1);
  GatingParams p = Params(InitGateWeights(4, 8, 6), 2);
  const RoutingDecision base = ComputeGates(x, Iota(40), p);
  for (DropPriority prio :
       {DropPriority::kPosition, DropPriority::kProbability}) {
    p.drop_priority = prio;
    p.capacity_factor = 1.0;
    const RoutingDecision tight = ApplyCapacity(base, 40, p);
    p.capacity_factor = 1.7;
    const RoutingDecision loose = ApplyCapacity(base, 40, p);
    for (std::size_t t = 0; t < 40; ++t) {
      for (int c = 0; c < 2; ++c) {
        if (tight.tokens[t].choices[c].kept) {
          EXPECT_TRUE(loose.tokens[t].choices[c].kept);
        }
      }
    }
  }
}

TEST(GatherFullSequenceTest, GroupOfOneMatchesSubSequence) {
  auto engine = MakeEngine(7, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 12, 4, -1, 1);
  GatingParams p = Params(InitGateWeights(4, 4, 7), 2);
  p.capacity_factor = 1.0;
  p.drop_mode = DropMode::kFullSequence;
  const RoutingDecision local = ComputeGates(x, Iota(12), p);
  SimWorld world(1);
  const std::vector<RoutingDecision> in = {local};
  const auto out = GatherFullSequenceDecision(world, {0}, in, p);
  const RoutingDecision sub = ApplyCapacity(local, 12, p);
  for (std::size_t t = 0; t < 12; ++t) {
    for (int c = 0; c < 2; ++c) {
      EXPECT_EQ(out[0].tokens[t].choices[c].kept,
                sub.tokens[t].choices[c].kept);
    }
  }
}

TEST(GatherFullSequenceTest, CapacityUsesTheWholeSequence) {
  // Two shards of 4 tokens, all routed to expert 0 of 4. Capacity over the
  // full sequence is floor(8 / 4) = 2, so only positions 0 and 1 survive;
  // sub-sequence dropping would keep one token per shard.
  GatingParams p = Params(Matrix::Zero(1, 4), 1);
  p.capacity_factor = 1.0;
  std::vector<RoutingDecision> local = {AllToExpert(0, 4, 4),
                                        AllToExpert(0, 4, 4)};
  for (auto& t : local[1].tokens) t.position += 4;
  SimWorld world(2);
  const auto out = GatherFullSequenceDecision(world, {0, 1}, local, p);
  EXPECT_EQ(out[0].kept_pairs(), 2u);
  EXPECT_EQ(out[1].kept_pairs(), 0u);
  EXPECT_TRUE(out[0].tokens[0].choices[0].kept);
  EXPECT_TRUE(out[0].tokens[1].choices[0].kept);
  ASSERT_EQ(world.ledger().size(), 1u);
  EXPECT_EQ(world.ledger()[0].tag, "route_gather");
  // 4 rows of (position, expert, gate) to one peer each way.
  EXPECT_EQ(world.ledger()[0].bytes_sent, (std::vector<std::uint64_t>{96, 96}));
}

TEST(GatherFullSequenceTest, AgreesWithSubSequenceWithoutOverflow) {
  auto engine = MakeEngine(8, RandomStream::kTokens);
  const Matrix x = UniformMatrix(engine, 16, 4, -1, 1);
  GatingParams p = Params(InitGateWeights(4, 4, 8), 1);
  p.capacity_factor = 4.0;  // capacity >= shard length, nothing can drop
  std::vector<RoutingDecision> local = {
      ComputeGates(x.topRows(8), Iota(8), p),
      ComputeGates(x.bottomRows(8), Iota(8, 8), p)};
  SimWorld world(2);
  const auto full = GatherFullSequenceDecision(world, {0, 1}, local, p);
  for (int m = 0; m < 2; ++m) {
    const RoutingDecision sub = ApplyCapacity(local[m], 8, p);
    EXPECT_EQ(full[m].kept_pairs(), sub.kept_pairs());
    EXPECT_EQ(full[m].kept_pairs(), 8u);
  }
}

TEST(GatherFullSequenceTest, UnequalShardsAreProtocolErrors) {
  GatingParams p = Params(Matrix::Zero(1, 4), 1);
  p.capacity_factor = 1.0;
  const std::vector<RoutingDecision> local = {AllToExpert(0, 4, 4),
                                              AllToExpert(0, 4, 3)};
  SimWorld world(2);
  EXPECT_THROW(GatherFullSequenceDecision(world, {0, 1}, local, p),
               ProtocolError);
}

TEST(LoadStatsTest, UniformRouting) {
  RoutingDecision d;
  d.num_experts = 4;
  for (int t = 0; t < 8; ++t) d.tokens.push_back({t, {{t % 4, 0.25, true}}});
  d.scores = Matrix::Constant(8, 4, 0.25);
  const LoadStats s = ComputeLoadStats(d, 4);
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{2, 2, 2, 2}));
  EXPECT_DOUBLE_EQ(s.imbalance, 1.0);
  EXPECT_DOUBLE_EQ(s.aux_loss, 1.0);
}

TEST(LoadStatsTest, AllTokensOnOneExpert) {
  const LoadStats s = ComputeLoadStats(AllToExpert(2, 4, 8), 4);
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{0, 0, 8, 0}));
  EXPECT_DOUBLE_EQ(s.imbalance, 4.0);
}

// Finite differences of the chosen gate values w.r.t. the logits.
Matrix FdLogitGradient(const Matrix& logits, const GatingParams& p,
                       const std::vector<std::vector<double>>& g) {
  const double eps = 1e-6;
  Matrix out = Matrix::Zero(logits.rows(), logits.cols());
  const Matrix eye = Matrix::Identity(logits.cols(), logits.cols());
  GatingParams q = p;
  q.gate_weights = eye;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const RoutingDecision base = ComputeGates(logits.row(t), Iota(1), q);
    for (Eigen::Index e = 0; e < logits.cols(); ++e) {
      Matrix plus = logits.row(t), minus = logits.row(t);
      plus(0, e) += eps;
      minus(0, e) -= eps;
      const RoutingDecision a = ComputeGates(plus, Iota(1), q);
      const RoutingDecision b = ComputeGates(minus, Iota(1), q);
      double d = 0.0;
      for (std::size_t c = 0; c < g[t].size(); ++c) {
        d += g[t][c] *
             (a.tokens[0].choices[c].gate - b.tokens[0].choices[c].gate) /
             (2 * eps);
      }
      out(t, e) = d;
    }
  }
  return out;
}

TEST(GateLogitGradientTest, MatchesFiniteDifferences) {
  auto engine = MakeEngine(9, RandomStream::kTokens);
  const Matrix logits = UniformMatrix(engine, 6, 5, -2, 2);
  for (GateFn fn : {GateFn::kSoftmax, GateFn::kSigmoid}) {
    for (bool renorm : {false, true}) {
      GatingParams p = Params(Matrix::Identity(5, 5), 2);
      p.gate_fn = fn;
      p.renormalize_topk = renorm;
      const RoutingDecision d = ComputeGates(logits, Iota(6), p);
      std::vector<std::vector<double>> g(6);
      for (int t = 0; t < 6; ++t) g[t] = {0.3 + t, -0.7};
      const Matrix analytic = GateLogitGradient(d, p, g);
      const Matrix fd = FdLogitGradient(logits, p, g);
      EXPECT_LT((analytic - fd).cwiseAbs().maxCoeff(), 1e-8)
          << GateFnName(fn) << " renorm=" << renorm;
    }
  }
}

TEST(GatingParamsTest, RejectsCapacityBelowOne) {
  GatingParams p = Params(Matrix::Zero(2, 2), 1);
  p.capacity_factor = 0.9;
  EXPECT_THROW(p.Validate(), ValidationError);
}

TEST(RouterNamesTest, Stable) {
  EXPECT_EQ(GateFnName(GateFn::kSoftmax), "softmax");
  EXPECT_EQ(DropModeName(DropMode::kFullSequence), "full-sequence");
  EXPECT_EQ(DropPriorityName(DropPriority::kProbability), "probability");
}

}  // namespace
}  // namespace foldsim
