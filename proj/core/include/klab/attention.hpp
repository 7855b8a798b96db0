#pragma once

#include <cstdint>
#include <functional>

#include "klab/array.hpp"
#include "klab/autodiff.hpp"
#include "klab/featmap.hpp"

namespace klab {

// Kernel evaluated on two raw vectors of equal length.
using KernelFn = std::function<double(const double*, const double*, std::size_t)>;

struct AttentionDiagnostics {
    // Rows whose pre-stabilization denominator fell inside (-near, +near).
    std::uint64_t near_zero_denominators = 0;
    double near_threshold = 1e-3;
};

// Direct evaluation of normalized kernel attention: row i is
// sum_j kappa(q_i, k_j) v_j / sum_j' kappa(q_i, k_j'), with the denominator
// shifted by epsilon * sign(denominator). O(L^2) time; the reference the
// linear path is checked against. epsilon == 0 with an all-zero kernel row
// raises a division error.
DenseArray quadratic_kernel_attention(const DenseArray& Q, const DenseArray& K,
                                      const DenseArray& V, const KernelFn& kernel,
                                      double epsilon = 1e-6,
                                      AttentionDiagnostics* diag = nullptr, bool causal = false);

// Same value computed with one pass of feature-space accumulators
// (sum_j phi(k_j) v_j^T and sum_j phi(k_j)); the L x L matrix is never
// materialized and auxiliary storage is independent of L.
void linear_kernel_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                  const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                  DenseArray& out, AttentionDiagnostics* diag = nullptr);
DenseArray linear_kernel_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                   const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                   AttentionDiagnostics* diag = nullptr);

// Decoder-style variant: row i sees keys j <= i via running prefix
// accumulators.
void causal_linear_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                  const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                  DenseArray& out, AttentionDiagnostics* diag = nullptr);
DenseArray causal_linear_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                   const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                   AttentionDiagnostics* diag = nullptr);

// Standard scaled dot-product baseline with 1/sqrt(d_q) temperature. The
// score matrix is materialized, so memory grows with L^2.
void softmax_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                            DenseArray& out);
DenseArray softmax_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V);

// ---- tape building blocks for the trainable encoder ---------------------------

// Normalized linear attention over feature rows. phi_q/phi_k are (B*L, F),
// values (B*L, d_v); output (B*L, d_v). near_count tallies near-zero
// denominators when provided.
Var linear_attention_rows(const Var& phi_q, const Var& phi_k, const Var& values,
                          std::size_t batch, std::size_t seq_len, double epsilon,
                          std::uint64_t* near_count = nullptr);

// Softmax attention over (B*L, d) rows for the baseline variant.
Var softmax_attention_rows(const Var& queries, const Var& keys, const Var& values,
                           std::size_t batch, std::size_t seq_len);

}  // namespace klab
