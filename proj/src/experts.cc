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

#include <cmath>
#include <numbers>
#include <string>

#include "foldsim/errors.h"

namespace foldsim {

std::string_view ActivationName(Activation act) {
  return act == Activation::kRelu ? "relu" : "gelu";
}

std::optional<Activation> ParseActivation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  return std::nullopt;
}

double Activate(Activation act, double z) {
  if (act == Activation::kRelu) return z > 0.0 ? z : 0.0;
  return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
}

double ActivateDerivative(Activation act, double z) {
  if (act == Activation::kRelu) return z > 0.0 ? 1.0 : 0.0;
  const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

ExpertParams InitExpertParams(int num_experts, int hidden, int ffn,
                              std::uint64_t seed, Activation activation) {
  if (num_experts < 1 || hidden < 1 || ffn < 1) {
    throw ValidationError("expert dimensions must be >= 1");
  }
  auto engine = MakeEngine(seed, RandomStream::kExpertWeights);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  ExpertParams params;
  params.activation = activation;
  for (int e = 0; e < num_experts; ++e) {
    params.w1.push_back(UniformMatrix(engine, hidden, ffn, -bound, bound));
    params.w2.push_back(UniformMatrix(engine, ffn, hidden, -bound, bound));
  }
  return params;
}

const ExpertShard& ExpertWeights::Shard(int expert) const {
  for (const ExpertShard& s : experts) {
    if (s.expert == expert) return s;
  }
  throw ValidationError("expert " + std::to_string(expert) +
                        " is not held by this rank");
}

bool ExpertWeights::Holds(int expert) const {
  for (const ExpertShard& s : experts) {
    if (s.expert == expert) return true;
  }
  return false;
}

ExpertWeights ShardExperts(const ExpertParams& full, int first_expert,
                           int count, int etp_rank, int etp_size) {
  if (etp_size < 1 || etp_rank < 0 || etp_rank >= etp_size) {
    throw ValidationError("invalid ETP shard " + std::to_string(etp_rank) +
                          "/" + std::to_string(etp_size));
  }
  if (full.ffn() % etp_size != 0) {
    throw ValidationError(
        "ffn=" + std::to_string(full.ffn()) +
        " is not divisible by etp=" + std::to_string(etp_size));
  }
  if (first_expert < 0 || count < 0 ||
      first_expert + count > full.num_experts()) {
    throw ValidationError("expert range out of bounds");
  }
  const int slice = full.ffn() / etp_size;
  const int offset = etp_rank * slice;
  ExpertWeights out;
  out.etp_rank = etp_rank;
  out.etp_size = etp_size;
  out.activation = full.activation;
  for (int e = first_expert; e < first_expert + count; ++e) {
    out.experts.push_back({e, full.w1[e].middleCols(offset, slice),
                           full.w2[e].middleRows(offset, slice)});
  }
  return out;
}

std::vector<ExpertWeights> InitExpertWeights(int num_experts, int hidden,
                                             int ffn, int etp_size,
                                             std::uint64_t seed,
                                             Activation activation) {
  const ExpertParams full =
      InitExpertParams(num_experts, hidden, ffn, seed, activation);
  std::vector<ExpertWeights> out;
  for (int r = 0; r < etp_size; ++r) {
    out.push_back(ShardExperts(full, 0, num_experts, r, etp_size));
  }
  return out;
}

Matrix ExpertForwardShard(const Matrix& tokens, const ExpertWeights& weights,
                          int expert, ExpertActivations* saved) {
  const ExpertShard& shard = weights.Shard(expert);
  if (tokens.cols() != shard.w1.rows()) {
    throw ValidationError("token width " + std::to_string(tokens.cols()) +
                          " != expert hidden " +
                          std::to_string(shard.w1.rows()));
  }
  Matrix pre = tokens * shard.w1;
  Matrix act = pre.unaryExpr(
      [a = weights.activation](double z) { return Activate(a, z); });
  Matrix out = act * shard.w2;
  if (saved != nullptr) {
    saved->input = tokens;
    saved->pre_activation = std::move(pre);
  }
  return out;
}

ExpertShardGrads ExpertBackwardShard(const Matrix& upstream,
                                     const ExpertActivations& saved,
                                     const ExpertWeights& weights, int expert) {
  const ExpertShard& shard = weights.Shard(expert);
  if (upstream.rows() != saved.input.rows() ||
      upstream.cols() != shard.w2.cols() ||
      saved.pre_activation.cols() != shard.w1.cols()) {
    throw ValidationError(
        "expert backward: upstream shape does not match the "
        "saved forward context");
  }
  const Activation a = weights.activation;
  const Matrix act =
      saved.pre_activation.unaryExpr([a](double z) { return Activate(a, z); });
  const Matrix d_act = upstream * shard.w2.transpose();
  const Matrix d_pre = d_act.cwiseProduct(saved.pre_activation.unaryExpr(
      [a](double z) { return ActivateDerivative(a, z); }));
  ExpertShardGrads grads;
  grads.d_w2 = act.transpose() * upstream;
  grads.d_w1 = saved.input.transpose() * d_pre;
  grads.d_input = d_pre * shard.w1.transpose();
  return grads;
}

}  // namespace foldsim
