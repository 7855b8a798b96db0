#include "klab/checks.hpp"

#include <cmath>

#include "klab/attention.hpp"

namespace klab {

namespace {

SpectralParams make_sampler(SamplerKind kind, std::size_t dim, std::size_t m,
                            std::uint64_t seed) {
    switch (kind) {
        case SamplerKind::Gmm: {
            Rng rng(seed);
            GmmParams p = GmmParams::init(2, dim, rng, 0.3);
            // Contracted scales keep both feature families well-conditioned.
            for (auto& s : p.scales)
                for (std::size_t i = 0; i < s.size(); ++i) s[i] *= 0.7;
            return p;
        }
        case SamplerKind::FastFood:
            return FastFoodParams::init(dim, m, seed);
        case SamplerKind::Generative:
            return GeneratorParams::init(dim, seed);
    }
    throw ContractError("make_sampler: bad kind");
}

}  // namespace

std::vector<OracleEquivalenceCase> check_oracle_equivalence(
    std::size_t instances, const std::vector<std::size_t>& lengths, std::size_t m,
    std::size_t d_qk, std::size_t d_v, double tolerance, std::uint64_t seed) {
    std::vector<OracleEquivalenceCase> out;
    std::size_t variant_idx = 0;
    for (const VariantSpec& variant : VariantSpec::all_kernelized()) {
        FeatureMapSpec spec;
        spec.kind = variant.featmap;
        spec.samples = m;
        spec.epsilon = 1e-6;
        for (std::size_t L : lengths) {
            OracleEquivalenceCase c;
            c.variant = variant.name();
            c.length = L;
            for (std::size_t inst = 0; inst < instances; ++inst) {
                const std::uint64_t s =
                    derive_seed(seed, variant_idx * 1000 + L, inst);
                SpectralParams params = make_sampler(variant.sampler, d_qk, m, s);
                const FrequencyMatrix omega = draw_frequencies(params, m, derive_seed(s, 1));
                Rng rng(derive_seed(s, 2));
                const DenseArray Q = DenseArray::randn({L, d_qk}, rng, 0.5);
                const DenseArray K = DenseArray::randn({L, d_qk}, rng, 0.5);
                const DenseArray V = DenseArray::randn({L, d_v}, rng, 1.0);

                const DenseArray lin = linear_kernel_attention(Q, K, V, spec, omega);
                KernelFn kfn = [&](const double* q, const double* k, std::size_t d) {
                    DenseArray qv({d}), kv({d});
                    std::copy_n(q, d, qv.data());
                    std::copy_n(k, d, kv.data());
                    return kernel_estimate(qv, kv, spec, omega);
                };
                const DenseArray quad =
                    quadratic_kernel_attention(Q, K, V, kfn, spec.epsilon);
                for (std::size_t i = 0; i < lin.size(); ++i)
                    c.max_abs_diff = std::max(c.max_abs_diff, std::abs(lin[i] - quad[i]));
            }
            c.pass = c.max_abs_diff <= tolerance;
            out.push_back(std::move(c));
        }
        ++variant_idx;
    }
    return out;
}

std::vector<KernelApproxCase> check_kernel_approximation(std::size_t pairs, std::size_t m_large,
                                                         std::size_t dim, std::uint64_t seed) {
    std::vector<KernelApproxCase> out;
    for (std::size_t i = 0; i < pairs; ++i) {
        Rng rng(derive_seed(seed, i));
        DenseArray q = DenseArray::randn({dim}, rng, 0.7);
        DenseArray k = DenseArray::randn({dim}, rng, 0.7);
        double d2 = 0;
        for (std::size_t j = 0; j < dim; ++j) d2 += (q[j] - k[j]) * (q[j] - k[j]);
        const double target = std::exp(-0.5 * d2);

        Rng omega_rng(derive_seed(seed, i, 0xABCDull));
        FrequencyMatrix omega;
        omega.rows = DenseArray::randn({m_large, dim}, omega_rng);

        // Per-sample kernel terms; the estimate is their mean and the standard
        // error comes from their spread.
        double nq = 0, nk = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            nq += q[j] * q[j];
            nk += k[j] * k[j];
        }
        for (int map = 0; map < 2; ++map) {
            double sum = 0, sum_sq = 0;
            for (std::size_t r = 0; r < m_large; ++r) {
                const double* w = omega.rows.data() + r * dim;
                double wq = 0, wk = 0;
                for (std::size_t j = 0; j < dim; ++j) {
                    wq += w[j] * q[j];
                    wk += w[j] * k[j];
                }
                const double term = map == 0 ? std::cos(wq - wk)
                                             : std::exp(wq + wk - nq - nk);
                sum += term;
                sum_sq += term * term;
            }
            const double mean = sum / static_cast<double>(m_large);
            const double var =
                sum_sq / static_cast<double>(m_large) - mean * mean;
            KernelApproxCase c;
            c.map = map == 0 ? "rks" : "prf";
            c.pair_index = i;
            c.estimate = mean;
            c.target = target;
            c.std_error = std::sqrt(std::max(var, 0.0) / static_cast<double>(m_large));
            c.pass = std::abs(mean - target) <= 3.0 * c.std_error;
            out.push_back(std::move(c));
        }
    }
    return out;
}

SelfSimilarityOutcome check_rks_self_similarity(std::size_t count, std::size_t m,
                                                std::size_t dim, std::uint64_t seed) {
    SelfSimilarityOutcome o;
    o.count = count;
    FeatureMapSpec spec;
    spec.kind = FeatureKind::Rks;
    spec.samples = m;
    Rng rng(seed);
    FrequencyMatrix omega;
    omega.rows = DenseArray::randn({m, dim}, rng);
    for (std::size_t i = 0; i < count; ++i) {
        const DenseArray x = DenseArray::randn({dim}, rng, 2.0);
        const double est = kernel_estimate(x, x, spec, omega);
        o.max_abs_dev = std::max(o.max_abs_dev, std::abs(est - 1.0));
    }
    o.pass = o.max_abs_dev <= 1e-12;
    return o;
}

MseInputs random_mse_inputs(std::size_t dim, std::size_t m, std::uint64_t seed) {
    Rng rng(seed);
    MseInputs in;
    in.q = DenseArray::randn({dim}, rng, 0.4);
    in.k = DenseArray::randn({dim}, rng, 0.4);
    in.mu = DenseArray::randn({dim}, rng, 0.4);
    in.scale = DenseArray::randn({dim, dim}, rng, 0.25);
    in.m = m;
    return in;
}

MseCheckSummary check_mse_closed_form(MseEstimator which, std::size_t sets, std::size_t trials,
                                      std::size_t m, std::size_t dim, double rel_tolerance,
                                      std::uint64_t seed) {
    MseCheckSummary summary;
    summary.all_pass = true;
    for (std::size_t s = 0; s < sets; ++s) {
        const MseInputs in = random_mse_inputs(dim, m, derive_seed(seed, s));
        MseCheckCase c;
        c.set_index = s;
        c.closed_form = which == MseEstimator::SymmetricPairRks ? mse_rks_closed_form(in)
                                                                : mse_prf_closed_form(in);
        const McMseResult mc = mc_mse(which, in, trials, derive_seed(seed, s, 0x3C3Cull));
        c.mc = mc.mse;
        c.mc_std_error = mc.std_error;
        c.rel_err = std::abs(c.closed_form - c.mc) / std::max(std::abs(c.mc), 1e-300);
        if (which == MseEstimator::SymmetricPairRks) {
            c.within_bound = c.closed_form <= 2.0 / static_cast<double>(m) + 1e-15;
        } else {
            c.unsquared_form = mse_prf_closed_form_unsquared(in);
            const double rel_unsq =
                std::abs(c.unsquared_form - c.mc) / std::max(std::abs(c.mc), 1e-300);
            if (rel_unsq > rel_tolerance) summary.unsquared_fails_somewhere = true;
        }
        c.pass = c.rel_err <= rel_tolerance && c.within_bound;
        summary.all_pass = summary.all_pass && c.pass;
        summary.cases.push_back(std::move(c));
    }
    return summary;
}

}  // namespace klab
