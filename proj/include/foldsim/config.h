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

#ifndef FOLDSIM_CONFIG_H_
#define FOLDSIM_CONFIG_H_

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "foldsim/costmodel.h"
#include "foldsim/experts.h"
#include "foldsim/simulation.h"
#include "foldsim/topology.h"

namespace foldsim {

// Everything a run needs, read from a flat key = value file:
//
//   # comment
//   seed = 7
//   [topology]
//   world_size = 8
//   tp = 2
//   ...
//
// Sections: [topology], [model], [router], [cluster], [simulate], [search].
// Keys before the first section header are top-level (only `seed`). Unknown
// sections, unknown keys and repeated keys are errors.
struct RunConfig {
  ParallelTopology topology;
  ModelDims dims;
  RouterConfig router;
  ClusterModel cluster;
  Activation activation = Activation::kRelu;
  std::uint64_t seed = 0;

  // [simulate]
  int workers = 1;
  bool backward = true;
  bool grad_check = false;
  double fd_eps = 1e-5;

  // [search]
  SearchConstraints search;

  SimulationSpec ToSimulationSpec() const;
};

// Throws ValidationError naming the line and key on any problem, and
// revalidates the topology, model, router and cluster blocks.
RunConfig ParseRunConfig(std::string_view text);

RunConfig LoadRunConfig(const std::string& path);

}  // namespace foldsim

#endif  // FOLDSIM_CONFIG_H_
