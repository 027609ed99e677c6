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

#include "foldsim/config.h"

#include <gtest/gtest.h>

#include <string>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

std::string ErrorOf(const std::string& text) {
  try {
    ParseRunConfig(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(ParseRunConfigTest, EmptyTextGivesDefaults) {
  const RunConfig c = ParseRunConfig("");
  EXPECT_EQ(c.topology, ParallelTopology::Create(1, 1, 1, 1, 1, 1));
  EXPECT_EQ(c.seed, 0u);
  EXPECT_FALSE(c.router.capacity_factor.has_value());
  EXPECT_EQ(c.workers, 1);
}

TEST(ParseRunConfigTest, ReadsEverySection) {
  const RunConfig c = ParseRunConfig(R"(
# leading comment
seed = 42
[topology]
world_size = 16   # trailing comment
tp = 2
cp = 2
pp = 2
ep = 4
etp = 1
layout = listing1
[model]
hidden = 8
ffn = 16
num_experts = 8
top_k = 2
layers = 4
seq_len = 32
batch = 2
elem_bytes = 4
activation = gelu
[router]
gate_fn = sigmoid
capacity_factor = 1.25
drop_mode = full-sequence
drop_priority = probability
renormalize = true
[cluster]
node_size = 4
intra_bw = 1e11
inter_bw = 1e10
latency_s = 2e-6
peak_flops = 1e14
[simulate]
workers = 3
backward = false
grad_check = false
fd_eps = 1e-6
[search]
memory_limit_bytes = 8e10
)");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.topology, ParallelTopology::Create(16, 2, 2, 4, 1, 2,
                                                 LayoutOrder::kListing1));
  EXPECT_EQ(c.dims.top_k, 2);
  EXPECT_EQ(c.dims.elem_bytes, 4);
  EXPECT_EQ(c.activation, Activation::kGelu);
  EXPECT_EQ(c.router.gate_fn, GateFn::kSigmoid);
  EXPECT_EQ(c.router.capacity_factor, 1.25);
  EXPECT_EQ(c.router.drop_mode, DropMode::kFullSequence);
  EXPECT_EQ(c.router.drop_priority, DropPriority::kProbability);
  EXPECT_TRUE(c.router.renormalize_topk);
  EXPECT_EQ(c.cluster.node_size, 4);
  EXPECT_EQ(c.cluster.per_link_latency_s, 2e-6);
  EXPECT_EQ(c.workers, 3);
  EXPECT_FALSE(c.backward);
  EXPECT_EQ(c.fd_eps, 1e-6);
  EXPECT_EQ(c.search.memory_limit_bytes, 8e10);

  const SimulationSpec s = c.ToSimulationSpec();
  EXPECT_EQ(s.workers, 3);
  EXPECT_EQ(s.router.capacity_factor, 1.25);
}

TEST(ParseRunConfigTest, DroplessKeyword) {
  const RunConfig c = ParseRunConfig("[router]\ncapacity_factor = dropless\n");
  EXPECT_FALSE(c.router.capacity_factor.has_value());
}

TEST(ParseRunConfigTest, RejectsUnknownKeysAndSections) {
  EXPECT_NE(ErrorOf("[model]\nhiden = 4\n").find("unknown key 'model.hiden'"),
            std::string::npos);
  EXPECT_NE(ErrorOf("[optimizer]\n").find("unknown section"),
            std::string::npos);
  EXPECT_NE(ErrorOf("tp = 2\n").find("unknown key 'tp'"), std::string::npos);
}

TEST(ParseRunConfigTest, ErrorsNameTheLine) {
  const std::string e = ErrorOf("[model]\n\nhidden = four\n");
  EXPECT_NE(e.find("line 3"), std::string::npos) << e;
  EXPECT_NE(e.find("model.hidden"), std::string::npos) << e;
}

TEST(ParseRunConfigTest, RejectsMalformedLines) {
  EXPECT_FALSE(ErrorOf("[model\n").empty());
  EXPECT_FALSE(ErrorOf("[model]\nhidden\n").empty());
  EXPECT_FALSE(ErrorOf("[model]\nhidden =\n").empty());
  EXPECT_FALSE(ErrorOf("[model]\nhidden = 4\nhidden = 4\n").empty());
  EXPECT_FALSE(ErrorOf("[router]\nrenormalize = yes\n").empty());
  EXPECT_FALSE(ErrorOf("[router]\ndrop_mode = global\n").empty());
}

TEST(ParseRunConfigTest, RevalidatesModuleInvariants) {
  EXPECT_NE(ErrorOf("[topology]\nworld_size = 8\ntp = 3\n").find("tp*cp*pp"),
            std::string::npos);
  EXPECT_FALSE(ErrorOf("[model]\nnum_experts = 2\ntop_k = 3\n").empty());
  EXPECT_FALSE(ErrorOf("[router]\ncapacity_factor = 0.5\n").empty());
  EXPECT_FALSE(ErrorOf("[cluster]\ninter_bw = 1e12\n").empty());
  EXPECT_FALSE(ErrorOf("[simulate]\nworkers = 0\n").empty());
  EXPECT_FALSE(ErrorOf("[model]\ntop_k = 1\n[router]\ntop_k = 2\n").empty());
}

TEST(LoadRunConfigTest, ReadsTheShippedExamples) {
  const std::string root = FOLDSIM_TEST_DATA_DIR "/../configs/";
  for (const char* name :
       {"listing1_64.ini", "simulate_small.ini", "mixtral_search.ini"}) {
    EXPECT_NO_THROW(LoadRunConfig(root + name)) << name;
  }
  EXPECT_THROW(LoadRunConfig(root + "missing.ini"), ValidationError);
}

}  // namespace
}  // namespace foldsim
