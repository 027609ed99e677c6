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

#include "foldsim/oracle.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

struct Evaluation {
  Matrix y;
  std::vector<std::vector<OracleRoute>> routes;
  // Selected experts, kept flags and ReLU patterns, flattened.
  std::vector<std::int64_t> signature;
};

Evaluation Evaluate(const Matrix& x, const OracleModel& m,
                    const CapacityScopes& scopes) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index hidden = x.cols();
  const int num_experts = static_cast<int>(m.gate_weights.cols());
  const int ffn = m.experts.ffn();
  if (m.gate_weights.rows() != hidden || m.experts.hidden() != hidden) {
    throw ValidationError("oracle: weight shapes do not match the input");
  }
  if (!x.allFinite()) throw NumericError("oracle: non-finite input");

  Evaluation ev;
  ev.routes.resize(rows);
  std::vector<double> logits(num_experts), scores(num_experts);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (int e = 0; e < num_experts; ++e) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < hidden; ++j) {
        acc += x(i, j) * m.gate_weights(j, e);
      }
      logits[e] = acc;
    }
    if (m.gate_fn == GateFn::kSoftmax) {
      double peak = logits[0];
      for (int e = 1; e < num_experts; ++e) peak = std::max(peak, logits[e]);
      double denom = 0.0;
      for (int e = 0; e < num_experts; ++e) denom += std::exp(logits[e] - peak);
      for (int e = 0; e < num_experts; ++e) {
        scores[e] = std::exp(logits[e] - peak) / denom;
      }
    } else {
      for (int e = 0; e < num_experts; ++e) {
        scores[e] = 1.0 / (1.0 + std::exp(-logits[e]));
      }
    }
    // Selection by repeated arg-max; lower id wins ties.
    std::vector<bool> taken(num_experts, false);
    double selected = 0.0;
    for (int slot = 0; slot < m.top_k; ++slot) {
      int best = -1;
      for (int e = 0; e < num_experts; ++e) {
        if (!taken[e] && (best < 0 || scores[e] > scores[best])) best = e;
      }
      taken[best] = true;
      selected += scores[best];
      ev.routes[i].push_back({best, scores[best], true});
    }
    if (m.renormalize_topk) {
      for (OracleRoute& r : ev.routes[i]) r.gate /= selected;
    }
  }

  if (m.capacity_factor) {
    CapacityScopes all = scopes;
    if (all.empty()) {
      all.emplace_back(rows);
      std::iota(all[0].begin(), all[0].end(), std::size_t{0});
    }
    std::vector<int> covered(rows, 0);
    for (const auto& scope : all) {
      for (std::size_t r : scope) {
        if (r >= static_cast<std::size_t>(rows)) {
          throw ValidationError("oracle: scope row out of range");
        }
        ++covered[r];
      }
    }
    if (std::any_of(covered.begin(), covered.end(),
                    [](int c) { return c != 1; })) {
      throw ValidationError("oracle: scopes must partition the rows");
    }
    for (auto scope : all) {
      std::sort(scope.begin(), scope.end());
      const double raw =
          *m.capacity_factor * static_cast<double>(scope.size()) / num_experts;
      const std::size_t capacity =
          std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(raw)));
      for (int e = 0; e < num_experts; ++e) {
        // (row, slot) pairs routed to e in priority order.
        std::vector<std::pair<std::size_t, std::size_t>> claims;
        for (std::size_t r : scope) {
          for (std::size_t s = 0; s < ev.routes[r].size(); ++s) {
            if (ev.routes[r][s].expert == e) claims.emplace_back(r, s);
          }
        }
        if (m.drop_priority == DropPriority::kProbability) {
          std::stable_sort(claims.begin(), claims.end(),
                           [&](const auto& a, const auto& b) {
                             return ev.routes[a.first][a.second].gate >
                                    ev.routes[b.first][b.second].gate;
                           });
        }
        for (std::size_t c = capacity; c < claims.size(); ++c) {
          ev.routes[claims[c].first][claims[c].second].kept = false;
        }
      }
    }
  }

  ev.y = Matrix::Zero(rows, hidden);
  std::vector<double> act(ffn);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (const OracleRoute& r : ev.routes[i]) {
      ev.signature.push_back(r.expert);
      ev.signature.push_back(r.kept ? 1 : 0);
      if (!r.kept) continue;
      const Matrix& w1 = m.experts.w1[r.expert];
      const Matrix& w2 = m.experts.w2[r.expert];
      for (int f = 0; f < ffn; ++f) {
        double z = 0.0;
        for (Eigen::Index j = 0; j < hidden; ++j) z += x(i, j) * w1(j, f);
        if (m.experts.activation == Activation::kRelu) {
          ev.signature.push_back(z > 0.0 ? 1 : 0);
        }
        act[f] = Activate(m.experts.activation, z);
      }
      for (Eigen::Index j = 0; j < hidden; ++j) {
        double out = 0.0;
        for (int f = 0; f < ffn; ++f) out += act[f] * w2(f, j);
        ev.y(i, j) += r.gate * out;
      }
    }
  }
  return ev;
}

double Loss(const Matrix& y, const Matrix& upstream) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      loss += upstream(i, j) * y(i, j);
    }
  }
  return loss;
}

}  // namespace

OracleModel OracleModel::From(const GatingParams& gating,
                              const ExpertParams& experts) {
  OracleModel m;
  m.gate_weights = gating.gate_weights;
  m.experts = experts;
  m.top_k = gating.top_k;
  m.gate_fn = gating.gate_fn;
  m.renormalize_topk = gating.renormalize_topk;
  m.capacity_factor = gating.capacity_factor;
  m.drop_priority = gating.drop_priority;
  return m;
}

OracleOutput OracleMoeForward(const Matrix& x, const OracleModel& model,
                              const CapacityScopes& scopes) {
  Evaluation ev = Evaluate(x, model, scopes);
  return {std::move(ev.y), std::move(ev.routes)};
}

FdGradients OracleGradFd(const Matrix& x, const OracleModel& model,
                         const Matrix& upstream, double eps,
                         const CapacityScopes& scopes) {
  if (!(eps > 0.0)) throw ValidationError("finite-difference eps must be > 0");
  if (upstream.rows() != x.rows() || upstream.cols() != x.cols()) {
    throw ValidationError("upstream gradient shape must match the input");
  }
  const Evaluation base = Evaluate(x, model, scopes);
  FdGradients out;
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

  // Probes one coordinate; `slot` is restored before returning.
  auto probe = [&](double& slot, const Matrix& xs, const OracleModel& ms) {
    const double saved = slot;
    slot = saved + eps;
    const Evaluation plus = Evaluate(xs, ms, scopes);
    slot = saved - eps;
    const Evaluation minus = Evaluate(xs, ms, scopes);
    slot = saved;
    if (plus.signature != base.signature || minus.signature != base.signature) {
      ++out.unstable_probes;
      return kNaN;
    }
    return (Loss(plus.y, upstream) - Loss(minus.y, upstream)) / (2.0 * eps);
  };

  Matrix xs = x;
  OracleModel ms = model;
  out.d_input.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out.d_input(i, j) = probe(xs(i, j), xs, ms);
    }
  }
  out.d_gate_weights.resize(model.gate_weights.rows(),
                            model.gate_weights.cols());
  for (Eigen::Index i = 0; i < model.gate_weights.rows(); ++i) {
    for (Eigen::Index j = 0; j < model.gate_weights.cols(); ++j) {
      out.d_gate_weights(i, j) = probe(ms.gate_weights(i, j), xs, ms);
    }
  }
  for (int e = 0; e < model.experts.num_experts(); ++e) {
    Matrix d1(model.experts.w1[e].rows(), model.experts.w1[e].cols());
    for (Eigen::Index i = 0; i < d1.rows(); ++i) {
      for (Eigen::Index j = 0; j < d1.cols(); ++j) {
        d1(i, j) = probe(ms.experts.w1[e](i, j), xs, ms);
      }
    }
    Matrix d2(model.experts.w2[e].rows(), model.experts.w2[e].cols());
    for (Eigen::Index i = 0; i < d2.rows(); ++i) {
      for (Eigen::Index j = 0; j < d2.cols(); ++j) {
        d2(i, j) = probe(ms.experts.w2[e](i, j), xs, ms);
      }
    }
    out.d_w1.push_back(std::move(d1));
    out.d_w2.push_back(std::move(d2));
  }
  return out;
}

}  // namespace foldsim
