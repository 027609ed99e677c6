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

#include "foldsim/experts.h"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

Matrix Tokens(int rows, int cols, std::uint64_t seed) {
  auto engine = MakeEngine(seed, RandomStream::kTokens);
  return UniformMatrix(engine, rows, cols, -1, 1);
}

double Loss(const Matrix& upstream, const Matrix& y) {
  return (upstream.array() * y.array()).sum();
}

TEST(InitExpertWeightsTest, SingleShardIsTheFullMatrix) {
  const ExpertParams full = InitExpertParams(3, 4, 8, 11);
  const auto shards = InitExpertWeights(3, 4, 8, 1, 11);
  ASSERT_EQ(shards.size(), 1u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_EQ(shards[0].Shard(e).w1, full.w1[e]);
    EXPECT_EQ(shards[0].Shard(e).w2, full.w2[e]);
  }
}

TEST(InitExpertWeightsTest, ShardsConcatenateToTheFullMatrix) {
  const ExpertParams full = InitExpertParams(2, 4, 8, 12);
  const auto shards = InitExpertWeights(2, 4, 8, 2, 12);
  for (int e = 0; e < 2; ++e) {
    Matrix w1(4, 8), w2(8, 4);
    w1 << shards[0].Shard(e).w1, shards[1].Shard(e).w1;
    w2 << shards[0].Shard(e).w2, shards[1].Shard(e).w2;
    EXPECT_EQ(w1, full.w1[e]);
    EXPECT_EQ(w2, full.w2[e]);
  }
}

TEST(InitExpertWeightsTest, SeededAndBounded) {
  const ExpertParams a = InitExpertParams(2, 16, 8, 5);
  const ExpertParams b = InitExpertParams(2, 16, 8, 5);
  const ExpertParams c = InitExpertParams(2, 16, 8, 6);
  EXPECT_EQ(a.w1[1], b.w1[1]);
  EXPECT_NE(a.w1[1], c.w1[1]);
  EXPECT_LE(a.w2[0].cwiseAbs().maxCoeff(), 0.25);
}

TEST(InitExpertWeightsTest, IndivisibleFfnIsRejected) {
  EXPECT_THROW(InitExpertWeights(2, 4, 6, 4, 1), ValidationError);
}

TEST(ExpertForwardShardTest, HandComputedScalar) {
  ExpertParams p;
  p.w1 = {Matrix::Constant(1, 1, 2.0)};
  p.w2 = {Matrix::Constant(1, 1, 3.0)};
  const ExpertWeights w = ShardExperts(p, 0, 1, 0, 1);
  EXPECT_EQ(ExpertForwardShard(Matrix::Ones(1, 1), w, 0)(0, 0), 6.0);
  EXPECT_EQ(ExpertForwardShard(-Matrix::Ones(1, 1), w, 0)(0, 0), 0.0);
}

TEST(ExpertForwardShardTest, ZeroInputGivesZeroOutput) {
  const auto w = InitExpertWeights(1, 4, 8, 1, 3);
  EXPECT_EQ(ExpertForwardShard(Matrix::Zero(3, 4), w[0], 0),
            Matrix::Zero(3, 4));
}

TEST(ExpertForwardShardTest, PartialsSumToTheUnshardedOutput) {
  const Matrix x = Tokens(7, 6, 4);
  for (Activation act : {Activation::kRelu, Activation::kGelu}) {
    const auto full = InitExpertWeights(2, 6, 12, 1, 4, act);
    const Matrix y = ExpertForwardShard(x, full[0], 1);
    for (int etp : {2, 3, 4}) {
      const auto shards = InitExpertWeights(2, 6, 12, etp, 4, act);
      Matrix sum = Matrix::Zero(7, 6);
      for (const ExpertWeights& s : shards) sum += ExpertForwardShard(x, s, 1);
      EXPECT_LE((sum - y).cwiseAbs().maxCoeff(), 1e-12) << etp;
    }
  }
}

TEST(ExpertForwardShardTest, ReluIsPositivelyHomogeneous) {
  const auto w = InitExpertWeights(1, 5, 10, 1, 8);
  const Matrix x = Tokens(4, 5, 8);
  const Matrix y = ExpertForwardShard(x, w[0], 0);
  EXPECT_LE(
      (ExpertForwardShard(2.5 * x, w[0], 0) - 2.5 * y).cwiseAbs().maxCoeff(),
      1e-14);
}

TEST(ExpertForwardShardTest, UnknownExpertIsRejected) {
  const auto w = InitExpertWeights(2, 4, 8, 1, 1);
  const ExpertWeights one =
      ShardExperts(InitExpertParams(2, 4, 8, 1), 1, 1, 0, 1);
  EXPECT_FALSE(one.Holds(0));
  EXPECT_THROW(ExpertForwardShard(Matrix::Zero(1, 4), one, 0), ValidationError);
  EXPECT_THROW(ExpertForwardShard(Matrix::Zero(1, 3), w[0], 0),
               ValidationError);
}

TEST(ExpertBackwardShardTest, ZeroUpstreamGivesZeroGradients) {
  const auto w = InitExpertWeights(1, 4, 8, 1, 2);
  ExpertActivations saved;
  ExpertForwardShard(Tokens(3, 4, 2), w[0], 0, &saved);
  const ExpertShardGrads g =
      ExpertBackwardShard(Matrix::Zero(3, 4), saved, w[0], 0);
  EXPECT_EQ(g.d_input.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.d_w1.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.d_w2.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ExpertBackwardShardTest, MatchesFiniteDifferences) {
  const int h = 4, ffn = 8;
  const Matrix x = Tokens(5, h, 21);
  const Matrix up = Tokens(5, h, 22);
  for (Activation act : {Activation::kRelu, Activation::kGelu}) {
    ExpertParams p = InitExpertParams(1, h, ffn, 23, act);
    const ExpertWeights w = ShardExperts(p, 0, 1, 0, 1);
    ExpertActivations saved;
    ExpertForwardShard(x, w, 0, &saved);
    const ExpertShardGrads g = ExpertBackwardShard(up, saved, w, 0);

    const double eps = 1e-6;
    auto loss_at = [&](const Matrix& xx, const ExpertParams& pp) {
      return Loss(up, ExpertForwardShard(xx, ShardExperts(pp, 0, 1, 0, 1), 0));
    };
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Matrix a = x, b = x;
      a.data()[i] += eps;
      b.data()[i] -= eps;
      EXPECT_NEAR(g.d_input.data()[i],
                  (loss_at(a, p) - loss_at(b, p)) / (2 * eps), 1e-7);
    }
    for (int which = 0; which < 2; ++which) {
      Matrix& m = which == 0 ? p.w1[0] : p.w2[0];
      const Matrix& grad = which == 0 ? g.d_w1 : g.d_w2;
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double keep = m.data()[i];
        m.data()[i] = keep + eps;
        const double lp = loss_at(x, p);
        m.data()[i] = keep - eps;
        const double lm = loss_at(x, p);
        m.data()[i] = keep;
        EXPECT_NEAR(grad.data()[i], (lp - lm) / (2 * eps), 1e-7);
      }
    }
  }
}

TEST(ExpertBackwardShardTest, TokenGradientPartialsSumAcrossShards) {
  const Matrix x = Tokens(6, 4, 31);
  const Matrix up = Tokens(6, 4, 32);
  const auto full = InitExpertWeights(1, 4, 8, 1, 33);
  ExpertActivations saved;
  ExpertForwardShard(x, full[0], 0, &saved);
  const Matrix expect = ExpertBackwardShard(up, saved, full[0], 0).d_input;
  const auto shards = InitExpertWeights(1, 4, 8, 2, 33);
  Matrix sum = Matrix::Zero(6, 4);
  for (const ExpertWeights& s : shards) {
    ExpertActivations a;
    ExpertForwardShard(x, s, 0, &a);
    sum += ExpertBackwardShard(up, a, s, 0).d_input;
  }
  EXPECT_LE((sum - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExpertBackwardShardTest, ShapeMismatchIsRejected) {
  const auto w = InitExpertWeights(1, 4, 8, 1, 2);
  ExpertActivations saved;
  ExpertForwardShard(Tokens(3, 4, 2), w[0], 0, &saved);
  EXPECT_THROW(ExpertBackwardShard(Matrix::Zero(2, 4), saved, w[0], 0),
               ValidationError);
}

TEST(ActivationTest, GeluDerivativeMatchesDifferences) {
  for (double z : {-2.0, -0.3, 0.0, 0.4, 1.7}) {
    const double fd = (Activate(Activation::kGelu, z + 1e-6) -
                       Activate(Activation::kGelu, z - 1e-6)) /
                      2e-6;
    EXPECT_NEAR(ActivateDerivative(Activation::kGelu, z), fd, 1e-8);
  }
  EXPECT_EQ(ParseActivation("gelu"), Activation::kGelu);
  EXPECT_FALSE(ParseActivation("swiglu").has_value());
}

}  // namespace
}  // namespace foldsim
