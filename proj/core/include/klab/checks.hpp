#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "klab/analysis.hpp"
#include "klab/featmap.hpp"
#include "klab/model.hpp"

namespace klab {

// Verification routines shared by the CLI subcommands and the acceptance
// suite. Each returns per-case records with a pass flag; a seed pins every
// random draw.

struct OracleEquivalenceCase {
    std::string variant;
    std::size_t length = 0;
    double max_abs_diff = 0;
    bool pass = false;
};
// Linear rewrite vs direct quadratic evaluation under the same feature map,
// frequencies and stabilizer, across all six kernelized variants.
std::vector<OracleEquivalenceCase> check_oracle_equivalence(
    std::size_t instances, const std::vector<std::size_t>& lengths, std::size_t m,
    std::size_t d_qk, std::size_t d_v, double tolerance, std::uint64_t seed);

struct KernelApproxCase {
    std::string map;
    std::size_t pair_index = 0;
    double estimate = 0;
    double target = 0;
    double std_error = 0;
    bool pass = false;
};
// Standard-normal frequencies: both maps must reproduce the Gaussian kernel
// exp(-|q-k|^2/2) within 3 Monte Carlo standard errors per pair.
std::vector<KernelApproxCase> check_kernel_approximation(std::size_t pairs, std::size_t m_large,
                                                         std::size_t dim, std::uint64_t seed);

struct SelfSimilarityOutcome {
    std::size_t count = 0;
    double max_abs_dev = 0;
    bool pass = false;
};
// kappa_hat(x, x) == 1 exactly (to tolerance 1e-12) for the trigonometric map.
SelfSimilarityOutcome check_rks_self_similarity(std::size_t count, std::size_t m,
                                                std::size_t dim, std::uint64_t seed);

struct MseCheckCase {
    std::size_t set_index = 0;
    double closed_form = 0;
    double unsquared_form = 0;  // PRF only; 0 for RKS
    double mc = 0;
    double mc_std_error = 0;
    double rel_err = 0;
    bool within_bound = true;  // RKS: closed form <= 2/m
    bool pass = false;
};
struct MseCheckSummary {
    std::vector<MseCheckCase> cases;
    bool all_pass = false;
    bool unsquared_fails_somewhere = false;  // PRF adjudication arm
};
MseCheckSummary check_mse_closed_form(MseEstimator which, std::size_t sets, std::size_t trials,
                                      std::size_t m, std::size_t dim, double rel_tolerance,
                                      std::uint64_t seed);

// Random parameter set used by the MSE checks; exposed for the tests.
MseInputs random_mse_inputs(std::size_t dim, std::size_t m, std::uint64_t seed);

}  // namespace klab
