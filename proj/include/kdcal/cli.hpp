// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kdcal {

/// Entry point of the `kdcal` tool. Returns the process exit status; all
/// diagnostics go to `err`. Subcommands: train-teacher, distill, evaluate,
/// compare, make-synthetic.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kdcal
