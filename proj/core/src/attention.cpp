#include "klab/attention.hpp"

#include <cmath>
#include <string>

namespace klab {

namespace {

double stabilized(double den, double epsilon, AttentionDiagnostics* diag) {
    if (diag && std::abs(den) < diag->near_threshold) ++diag->near_zero_denominators;
    if (epsilon == 0.0) {
        if (den == 0.0)
            throw DataError("attention: zero denominator with epsilon = 0");
        return den;
    }
    return den + (den >= 0 ? epsilon : -epsilon);
}

void check_qkv(const DenseArray& Q, const DenseArray& K, const DenseArray& V) {
    if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2)
        throw DimensionError("attention: Q, K, V must be rank 2");
    if (Q.cols() != K.cols()) throw DimensionError("attention: query/key dims differ");
    if (K.rows() != V.rows()) throw DimensionError("attention: key/value counts differ");
    if (Q.rows() < 1) throw DimensionError("attention: empty sequence");
}

}  // namespace

DenseArray quadratic_kernel_attention(const DenseArray& Q, const DenseArray& K,
                                      const DenseArray& V, const KernelFn& kernel,
                                      double epsilon, AttentionDiagnostics* diag, bool causal) {
    check_qkv(Q, K, V);
    const std::size_t L = Q.rows(), Lk = K.rows(), d = Q.cols(), dv = V.cols();
    DenseArray out({L, dv});
    std::vector<double> kappa(Lk);
    for (std::size_t i = 0; i < L; ++i) {
        const double* qi = Q.data() + i * d;
        const std::size_t limit = causal ? (i + 1 < Lk ? i + 1 : Lk) : Lk;
        double den = 0;
        for (std::size_t j = 0; j < limit; ++j) {
            kappa[j] = kernel(qi, K.data() + j * d, d);
            den += kappa[j];
        }
        den = stabilized(den, epsilon, diag);
        double* oi = out.data() + i * dv;
        for (std::size_t j = 0; j < limit; ++j) {
            const double w = kappa[j] / den;
            const double* vj = V.data() + j * dv;
            for (std::size_t c = 0; c < dv; ++c) oi[c] += w * vj[c];
        }
    }
    return out;
}

void linear_kernel_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                  const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                  DenseArray& out, AttentionDiagnostics* diag) {
    check_qkv(Q, K, V);
    spec.validate();
    const std::size_t L = Q.rows(), Lk = K.rows(), d = Q.cols(), dv = V.cols();
    const std::size_t f = spec.feature_dim();
    if (out.rank() != 2 || out.rows() != L || out.cols() != dv)
        throw DimensionError("linear_kernel_attention: bad output shape");

    // Accumulators: f*dv for sum phi(k) v^T, f for sum phi(k), f scratch.
    DenseArray accum({f, dv});
    DenseArray key_sum({f});
    DenseArray phi({f});
    for (std::size_t j = 0; j < Lk; ++j) {
        feature_map_into(K.data() + j * d, d, spec, omega, phi.data());
        const double* vj = V.data() + j * dv;
        for (std::size_t r = 0; r < f; ++r) {
            const double p = phi[r];
            key_sum[r] += p;
            double* arow = accum.data() + r * dv;
            for (std::size_t c = 0; c < dv; ++c) arow[c] += p * vj[c];
        }
    }
    for (std::size_t i = 0; i < L; ++i) {
        feature_map_into(Q.data() + i * d, d, spec, omega, phi.data());
        double den = 0;
        for (std::size_t r = 0; r < f; ++r) den += phi[r] * key_sum[r];
        den = stabilized(den, spec.epsilon, diag);
        double* oi = out.data() + i * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] = 0;
        for (std::size_t r = 0; r < f; ++r) {
            const double p = phi[r];
            const double* arow = accum.data() + r * dv;
            for (std::size_t c = 0; c < dv; ++c) oi[c] += p * arow[c];
        }
        for (std::size_t c = 0; c < dv; ++c) oi[c] /= den;
    }
}

DenseArray linear_kernel_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                   const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                   AttentionDiagnostics* diag) {
    DenseArray out({Q.rows(), V.cols()});
    linear_kernel_attention_into(Q, K, V, spec, omega, out, diag);
    return out;
}

void causal_linear_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                  const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                  DenseArray& out, AttentionDiagnostics* diag) {
    check_qkv(Q, K, V);
    spec.validate();
    if (Q.rows() != K.rows())
        throw DimensionError("causal attention: query and key counts must match");
    const std::size_t L = Q.rows(), d = Q.cols(), dv = V.cols();
    const std::size_t f = spec.feature_dim();
    if (out.rank() != 2 || out.rows() != L || out.cols() != dv)
        throw DimensionError("causal_linear_attention: bad output shape");

    DenseArray accum({f, dv});
    DenseArray key_sum({f});
    DenseArray phi({f});
    for (std::size_t i = 0; i < L; ++i) {
        feature_map_into(K.data() + i * d, d, spec, omega, phi.data());
        const double* vi = V.data() + i * dv;
        for (std::size_t r = 0; r < f; ++r) {
            const double p = phi[r];
            key_sum[r] += p;
            double* arow = accum.data() + r * dv;
            for (std::size_t c = 0; c < dv; ++c) arow[c] += p * vi[c];
        }
        feature_map_into(Q.data() + i * d, d, spec, omega, phi.data());
        double den = 0;
        for (std::size_t r = 0; r < f; ++r) den += phi[r] * key_sum[r];
        den = stabilized(den, spec.epsilon, diag);
        double* oi = out.data() + i * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] = 0;
        for (std::size_t r = 0; r < f; ++r) {
            const double p = phi[r];
            const double* arow = accum.data() + r * dv;
            for (std::size_t c = 0; c < dv; ++c) oi[c] += p * arow[c];
        }
        for (std::size_t c = 0; c < dv; ++c) oi[c] /= den;
    }
}

DenseArray causal_linear_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                                   const FeatureMapSpec& spec, const FrequencyMatrix& omega,
                                   AttentionDiagnostics* diag) {
    DenseArray out({Q.rows(), V.cols()});
    causal_linear_attention_into(Q, K, V, spec, omega, out, diag);
    return out;
}

void softmax_attention_into(const DenseArray& Q, const DenseArray& K, const DenseArray& V,
                            DenseArray& out) {
    check_qkv(Q, K, V);
    const std::size_t L = Q.rows(), Lk = K.rows(), d = Q.cols(), dv = V.cols();
    if (out.rank() != 2 || out.rows() != L || out.cols() != dv)
        throw DimensionError("softmax_attention: bad output shape");
    const double temp = 1.0 / std::sqrt(static_cast<double>(d));
    DenseArray scores({L, Lk});
    for (std::size_t i = 0; i < L; ++i) {
        const double* qi = Q.data() + i * d;
        double* srow = scores.data() + i * Lk;
        double mx = -1e300;
        for (std::size_t j = 0; j < Lk; ++j) {
            const double* kj = K.data() + j * d;
            double t = 0;
            for (std::size_t c = 0; c < d; ++c) t += qi[c] * kj[c];
            srow[j] = t * temp;
            mx = std::max(mx, srow[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < Lk; ++j) {
            srow[j] = std::exp(srow[j] - mx);
            z += srow[j];
        }
        double* oi = out.data() + i * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] = 0;
        for (std::size_t j = 0; j < Lk; ++j) {
            const double w = srow[j] / z;
            const double* vj = V.data() + j * dv;
            for (std::size_t c = 0; c < dv; ++c) oi[c] += w * vj[c];
        }
    }
}

DenseArray softmax_attention(const DenseArray& Q, const DenseArray& K, const DenseArray& V) {
    DenseArray out({Q.rows(), V.cols()});
    softmax_attention_into(Q, K, V, out);
    return out;
}

Var linear_attention_rows(const Var& phi_q, const Var& phi_k, const Var& values,
                          std::size_t batch, std::size_t seq_len, double epsilon,
                          std::uint64_t* near_count) {
    const std::size_t f = phi_q.value().cols();
    const std::size_t dv = values.value().cols();
    if (phi_q.value().rows() != batch * seq_len || values.value().rows() != batch * seq_len)
        throw DimensionError("linear_attention_rows: row count must be batch * seq_len");
    Var pq = reshape(phi_q, {batch, seq_len, f});
    Var pk = reshape(phi_k, {batch, seq_len, f});
    Var v3 = reshape(values, {batch, seq_len, dv});
    Var ctx = bmm(pk, v3, /*trans_a=*/true);               // (B, F, d_v)
    Var numer = reshape(bmm(pq, ctx), {batch * seq_len, dv});
    Var ksum = reshape(reduce_sum(pk, 1), {batch, f, 1});  // sum_j phi(k_j)
    Var den = reshape(bmm(pq, ksum), {batch * seq_len});
    den = stabilize_signed(den, epsilon, 1e-3, near_count);
    return div_rows(numer, den);
}

Var softmax_attention_rows(const Var& queries, const Var& keys, const Var& values,
                           std::size_t batch, std::size_t seq_len) {
    const std::size_t d = queries.value().cols();
    const std::size_t dv = values.value().cols();
    Var q3 = reshape(queries, {batch, seq_len, d});
    Var k3 = reshape(keys, {batch, seq_len, d});
    Var v3 = reshape(values, {batch, seq_len, dv});
    Var scores = scale(bmm(q3, k3, false, /*trans_b=*/true),
                       1.0 / std::sqrt(static_cast<double>(d)));
    Var probs = softmax(scores, 2);
    return reshape(bmm(probs, v3), {batch * seq_len, dv});
}

}  // namespace klab
