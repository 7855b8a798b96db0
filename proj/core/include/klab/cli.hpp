#pragma once

#include <string>
#include <vector>

namespace klab {

// Subcommand dispatcher behind the klab binary: kernel-check, verify-mse,
// train-synthetic, grad-stats, bench, eigvals. Each subcommand reads one
// config file and writes one line-delimited results file ("-" = stdout).
// Exit codes: 0 success, 1 runtime error, 2 acceptance/validation failure,
// 64 usage. Seed precedence: config < KLAB_SEED < --seed.
int cli_dispatch(const std::vector<std::string>& args);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace klab
