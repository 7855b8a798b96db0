#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "klab/array.hpp"
#include "klab/rng.hpp"

namespace klab {

// Inputs of the closed-form variance expressions: a query/key pair, the
// learnt mean vector and scale factor S (covariance S S^T), and the sample
// count m. p = k - q and o = k + q are derived.
struct MseInputs {
    DenseArray q, k;
    DenseArray mu;     // (d)
    DenseArray scale;  // (d, d) factor S
    std::size_t m = 8;

    DenseArray p() const;
    DenseArray o() const;
    void validate() const;
};

// Variance of the symmetric-pair trigonometric estimator:
//   (2/m) cos^2(mu.p) (1 - exp(-|S^T p|^2))^2.
// Valid in the two-component setting with opposite means and a shared scale;
// bounded above by 2/m.
double mse_rks_closed_form(const MseInputs& in);

// Variance of the positive-feature estimator with a single Gaussian
// spectral component, squared-norm reading:
//   (1/m) exp(-2(|q|^2 + |k|^2 - mu.o)) (exp(2|S^T o|^2) - exp(|S^T o|^2)).
double mse_prf_closed_form(const MseInputs& in);
// Same expression with |S^T o| unsquared; kept so the Monte Carlo oracle can
// adjudicate between the two readings.
double mse_prf_closed_form_unsquared(const MseInputs& in);

// One m-sample draw of each estimator. The trigonometric estimator draws m
// shared-noise pairs omega_i = S eta + mu, chi_i = S eta - mu and averages
// cos(omega.p) + cos(chi.p) with a 1/m normalizer; the positive estimator
// draws omega_i = S eta + mu and averages exp(omega.o - |q|^2 - |k|^2).
double symmetric_pair_rks_estimate(const MseInputs& in, Rng& rng);
double prf_gaussian_estimate(const MseInputs& in, Rng& rng);

// Exact expectations the two estimators are unbiased for.
double symmetric_pair_rks_mean(const MseInputs& in);
double prf_gaussian_mean(const MseInputs& in);

// Real form of the Gaussian-mixture kernel:
//   sum_c pi_c exp(-1/2 |S_c^T (q-k)|^2) cos(mu_c . (q-k)), pi_c = 1/C.
double gaussian_mixture_kernel(const std::vector<DenseArray>& means,
                               const std::vector<DenseArray>& scales, const DenseArray& q,
                               const DenseArray& k);

enum class MseEstimator { SymmetricPairRks, PrfGaussian };

struct McMseResult {
    double mse = 0;        // mean squared deviation from the exact kernel value
    double std_error = 0;  // standard error of that mean over trials
    double target = 0;     // the exact value the estimator is unbiased for
    std::size_t trials = 0;
};

// Monte Carlo MSE of the chosen estimator around the exact kernel value,
// with per-trial seeds derived from `seed`.
McMseResult mc_mse(MseEstimator which, const MseInputs& in, std::size_t trials,
                   std::uint64_t seed);

// Eigenvalues of S S^T, descending. S must be square.
std::vector<double> covariance_eigenvalues(const DenseArray& scale);

// ---- stochasticity metrics -----------------------------------------------------

// Repeated-run dispersion metrics for a binary task whose model emits one
// pre-sigmoid scalar per example. `output(example, run_seed)` must be
// deterministic given its seed. Labels are +-1.
struct VarianceReport {
    int runs = 0;
    std::vector<double> rsd;          // per example; +inf sentinel when mean == 0
    std::vector<bool> rsd_infinite;   // flags the sentinel rows
    std::vector<int> pi;              // min(positives, runs - positives)
    double single_accuracy = 0;       // first-run accuracy
    double voting_accuracy = 0;       // majority-vote accuracy
    double agv = 0;                   // voting_accuracy / single_accuracy
    std::vector<std::vector<double>> raw_outputs;  // [example][run]
};

VarianceReport stochasticity_metrics(
    const std::function<double(std::size_t example, std::uint64_t run_seed)>& output,
    const std::vector<int>& labels, int runs, std::uint64_t seed);

}  // namespace klab
