#pragma once

#include <cstddef>
#include <string>

#include "klab/array.hpp"
#include "klab/autodiff.hpp"
#include "klab/spectral.hpp"

namespace klab {

enum class FeatureKind { Rks, Prf };

std::string to_string(FeatureKind k);

struct FeatureMapSpec {
    FeatureKind kind = FeatureKind::Rks;
    std::size_t samples = 64;  // M
    double epsilon = 1e-6;     // attention denominator stabilizer
    double clamp = 30.0;       // PRF exponent bound
    bool half_norm = false;    // PRF with |x|^2/2 instead of |x|^2

    // Feature vector length: 2M for the trigonometric map, M for the
    // positive map.
    std::size_t feature_dim() const { return kind == FeatureKind::Rks ? 2 * samples : samples; }

    void validate() const;
};

// phi(x) = (1/sqrt(M)) [cos(Omega x); sin(Omega x)].
void rks_map_into(const double* x, std::size_t dim, const FrequencyMatrix& omega, double* out);
DenseArray rks_map(const DenseArray& x, const FrequencyMatrix& omega);

// phi(x) = (1/sqrt(M)) [exp(w_m.x - |x|^2)]_m, exponent clamped to
// [-clamp, clamp]. half_norm replaces |x|^2 with |x|^2 / 2.
void prf_map_into(const double* x, std::size_t dim, const FrequencyMatrix& omega, double clamp,
                  bool half_norm, double* out);
DenseArray prf_map(const DenseArray& x, const FrequencyMatrix& omega, double clamp = 30.0,
                   bool half_norm = false);

void feature_map_into(const double* x, std::size_t dim, const FeatureMapSpec& spec,
                      const FrequencyMatrix& omega, double* out);

// phi(q) . phi(k) under a shared frequency matrix.
double kernel_estimate(const DenseArray& q, const DenseArray& k, const FeatureMapSpec& spec,
                       const FrequencyMatrix& omega);

// ---- tape versions (rows of X mapped at once) ---------------------------------
// `proj` is X Omega^T (or the FastFood row projection), shape (R, M).
Var rks_feature_rows(const Var& proj);
Var prf_feature_rows(const Var& X, const Var& proj, double clamp, bool half_norm);
Var feature_rows(const Var& X, const Var& proj, const FeatureMapSpec& spec);

}  // namespace klab
