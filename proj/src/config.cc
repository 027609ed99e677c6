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

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "foldsim/errors.h"

namespace foldsim {
namespace {

std::string_view Trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T ParseNumber(std::string_view value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("'" + std::string(value) + "' is not a valid number");
  }
  return out;
}

bool ParseBool(std::string_view value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ValidationError("'" + std::string(value) +
                        "' is not a boolean (true|false)");
}

template <typename E>
E ParseChoice(std::string_view value,
              std::initializer_list<std::pair<std::string_view, E>> choices) {
  std::string names;
  for (const auto& [name, e] : choices) {
    if (name == value) return e;
    names += (names.empty() ? "" : "|") + std::string(name);
  }
  throw ValidationError("'" + std::string(value) + "' is not one of " + names);
}

struct Raw {
  int world_size = 1, tp = 1, cp = 1, pp = 1, ep = 1, etp = 1;
  LayoutOrder layout = LayoutOrder::kPpOutermost;
  std::optional<int> model_top_k, router_top_k;
};

std::map<std::string, std::function<void(RunConfig&, Raw&, std::string_view)>>
Setters() {
  using V = std::string_view;
  auto int_field = [](int Raw::* field) {
    return [field](RunConfig&, Raw& raw, V v) {
      raw.*field = ParseNumber<int>(v);
    };
  };
  auto dim = [](int ModelDims::* field) {
    return [field](RunConfig& c, Raw&, V v) {
      c.dims.*field = ParseNumber<int>(v);
    };
  };
  auto cluster = [](double ClusterModel::* field) {
    return [field](RunConfig& c, Raw&, V v) {
      c.cluster.*field = ParseNumber<double>(v);
    };
  };
  return {
      {"seed",
       [](RunConfig& c, Raw&, V v) { c.seed = ParseNumber<std::uint64_t>(v); }},
      {"topology.world_size", int_field(&Raw::world_size)},
      {"topology.tp", int_field(&Raw::tp)},
      {"topology.cp", int_field(&Raw::cp)},
      {"topology.pp", int_field(&Raw::pp)},
      {"topology.ep", int_field(&Raw::ep)},
      {"topology.etp", int_field(&Raw::etp)},
      {"topology.layout",
       [](RunConfig&, Raw& raw, V v) {
         raw.layout = ParseChoice<LayoutOrder>(
             v, {{"pp-outermost", LayoutOrder::kPpOutermost},
                 {"listing1", LayoutOrder::kListing1}});
       }},
      {"model.hidden", dim(&ModelDims::hidden)},
      {"model.ffn", dim(&ModelDims::ffn)},
      {"model.num_experts", dim(&ModelDims::num_experts)},
      {"model.top_k", [](RunConfig&, Raw& raw,
                         V v) { raw.model_top_k = ParseNumber<int>(v); }},
      {"model.layers", dim(&ModelDims::layers)},
      {"model.seq_len", dim(&ModelDims::seq_len)},
      {"model.batch", dim(&ModelDims::batch)},
      {"model.elem_bytes", dim(&ModelDims::elem_bytes)},
      {"model.activation",
       [](RunConfig& c, Raw&, V v) {
         c.activation = ParseChoice<Activation>(
             v, {{"relu", Activation::kRelu}, {"gelu", Activation::kGelu}});
       }},
      {"router.gate_fn",
       [](RunConfig& c, Raw&, V v) {
         c.router.gate_fn = ParseChoice<GateFn>(
             v, {{"softmax", GateFn::kSoftmax}, {"sigmoid", GateFn::kSigmoid}});
       }},
      {"router.top_k", [](RunConfig&, Raw& raw,
                          V v) { raw.router_top_k = ParseNumber<int>(v); }},
      {"router.capacity_factor",
       [](RunConfig& c, Raw&, V v) {
         if (v == "dropless") {
           c.router.capacity_factor.reset();
         } else {
           c.router.capacity_factor = ParseNumber<double>(v);
         }
       }},
      {"router.drop_mode",
       [](RunConfig& c, Raw&, V v) {
         c.router.drop_mode = ParseChoice<DropMode>(
             v, {{"sub-sequence", DropMode::kSubSequence},
                 {"full-sequence", DropMode::kFullSequence}});
       }},
      {"router.drop_priority",
       [](RunConfig& c, Raw&, V v) {
         c.router.drop_priority = ParseChoice<DropPriority>(
             v, {{"position", DropPriority::kPosition},
                 {"probability", DropPriority::kProbability}});
       }},
      {"router.renormalize",
       [](RunConfig& c, Raw&, V v) {
         c.router.renormalize_topk = ParseBool(v);
       }},
      {"cluster.node_size",
       [](RunConfig& c, Raw&, V v) {
         c.cluster.node_size = ParseNumber<int>(v);
       }},
      {"cluster.intra_bw", cluster(&ClusterModel::intra_bw)},
      {"cluster.inter_bw", cluster(&ClusterModel::inter_bw)},
      {"cluster.latency_s", cluster(&ClusterModel::per_link_latency_s)},
      {"cluster.peak_flops", cluster(&ClusterModel::peak_flops)},
      {"simulate.workers",
       [](RunConfig& c, Raw&, V v) { c.workers = ParseNumber<int>(v); }},
      {"simulate.backward",
       [](RunConfig& c, Raw&, V v) { c.backward = ParseBool(v); }},
      {"simulate.grad_check",
       [](RunConfig& c, Raw&, V v) { c.grad_check = ParseBool(v); }},
      {"simulate.fd_eps",
       [](RunConfig& c, Raw&, V v) { c.fd_eps = ParseNumber<double>(v); }},
      {"search.memory_limit_bytes",
       [](RunConfig& c, Raw&, V v) {
         c.search.memory_limit_bytes = ParseNumber<double>(v);
       }},
  };
}

const std::set<std::string, std::less<>> kSections = {
    "topology", "model", "router", "cluster", "simulate", "search"};

}  // namespace

SimulationSpec RunConfig::ToSimulationSpec() const {
  SimulationSpec spec;
  spec.topology = topology;
  spec.dims = dims;
  spec.router = router;
  spec.cluster = cluster;
  spec.activation = activation;
  spec.seed = seed;
  spec.workers = workers;
  spec.backward = backward;
  spec.grad_check = grad_check;
  spec.fd_eps = fd_eps;
  return spec;
}

RunConfig ParseRunConfig(std::string_view text) {
  static const auto setters = Setters();
  RunConfig config;
  Raw raw;
  std::string section;
  std::set<std::string> seen;
  int line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto at = [&] { return "line " + std::to_string(line_no) + ": "; };
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) {
      body = body.substr(0, hash);
    }
    body = Trim(body);
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') {
        throw ValidationError(at() + "unterminated section header");
      }
      const std::string_view name = Trim(body.substr(1, body.size() - 2));
      if (!kSections.contains(name)) {
        throw ValidationError(at() + "unknown section [" + std::string(name) +
                              "]");
      }
      section = name;
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError(at() + "expected 'key = value'");
    }
    const std::string key(Trim(body.substr(0, eq)));
    const std::string_view value = Trim(body.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    const auto it = setters.find(full);
    if (it == setters.end()) {
      throw ValidationError(at() + "unknown key '" + full + "'");
    }
    if (!seen.insert(full).second) {
      throw ValidationError(at() + "repeated key '" + full + "'");
    }
    if (value.empty()) {
      throw ValidationError(at() + "missing value for '" + full + "'");
    }
    try {
      it->second(config, raw, value);
    } catch (const ValidationError& e) {
      throw ValidationError(at() + full + ": " + e.what());
    }
  }

  if (raw.model_top_k && raw.router_top_k &&
      *raw.model_top_k != *raw.router_top_k) {
    throw ValidationError("model.top_k and router.top_k disagree");
  }
  if (raw.model_top_k) config.dims.top_k = *raw.model_top_k;
  if (raw.router_top_k) config.dims.top_k = *raw.router_top_k;

  config.topology = ParallelTopology::Create(
      raw.world_size, raw.tp, raw.cp, raw.ep, raw.etp, raw.pp, raw.layout);
  config.dims.Validate();
  config.cluster.Validate();
  if (config.router.capacity_factor && !(*config.router.capacity_factor >= 1)) {
    throw ValidationError("router.capacity_factor must be >= 1 or dropless");
  }
  if (config.workers < 1)
    throw ValidationError("simulate.workers must be >= 1");
  if (!(config.fd_eps > 0))
    throw ValidationError("simulate.fd_eps must be > 0");
  if (config.search.memory_limit_bytes &&
      !(*config.search.memory_limit_bytes > 0)) {
    throw ValidationError("search.memory_limit_bytes must be > 0");
  }
  return config;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw ValidationError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << file.rdbuf();
  return ParseRunConfig(text.str());
}

}  // namespace foldsim
