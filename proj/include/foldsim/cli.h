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

#ifndef FOLDSIM_CLI_H_
#define FOLDSIM_CLI_H_

#include <ostream>
#include <string>
#include <vector>

#include "foldsim/costmodel.h"

namespace foldsim {

// Column order of every CSV the tool writes.
inline constexpr const char* kCsvHeader =
    "config_id,tp,cp,pp,ep,etp,span,a2a_bytes,ag_bytes,rs_bytes,p2p_bytes,"
    "comm_time_s,compute_time_s,total_time_s,mfu_est";

// One CSV line (no trailing newline). Byte columns cover one MoE layer plus
// the step's pipeline transfers; time columns cover a whole step.
std::string CostCsvRow(int config_id, const CostReport& report);

// Runs one subcommand. `args` excludes the program name. Returns 0 on
// success, 2 on invalid input and 3 on an internal failure; failures print a
// single `error: <kind>: <message>` line to `err`.
int RunCli(const std::vector<std::string>& args, std::ostream& out,
           std::ostream& err);

}  // namespace foldsim

#endif  // FOLDSIM_CLI_H_
