#include <doctest.h>

#include <cmath>
#include <numeric>

#include "klab/attention.hpp"
#include "klab/checks.hpp"
#include "test_support.hpp"

using namespace klab;

namespace {

FrequencyMatrix normal_omega(std::size_t m, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    FrequencyMatrix fm;
    fm.rows = DenseArray::randn({m, dim}, rng);
    return fm;
}

KernelFn feature_kernel(const FeatureMapSpec& spec, const FrequencyMatrix& omega) {
    return [&spec, &omega](const double* q, const double* k, std::size_t d) {
        DenseArray qv({d}), kv({d});
        std::copy_n(q, d, qv.data());
        std::copy_n(k, d, kv.data());
        return kernel_estimate(qv, kv, spec, omega);
    };
}

}  // namespace

TEST_CASE("quadratic attention trivial cases") {
    const DenseArray q({1, 2}, {0.3, 0.4});
    const DenseArray k({1, 2}, {7.0, -2.0});
    const DenseArray v({1, 3}, {1.0, 2.0, 3.0});
    auto any_kernel = [](const double*, const double*, std::size_t) { return 0.37; };
    const DenseArray out = quadratic_kernel_attention(q, k, v, any_kernel, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(out[i] == doctest::Approx(v[i]).epsilon(1e-12));

    Rng rng(3);
    const DenseArray Q = DenseArray::randn({5, 2}, rng);
    const DenseArray K = DenseArray::randn({5, 2}, rng);
    const DenseArray V = DenseArray::randn({5, 3}, rng);
    auto ones = [](const double*, const double*, std::size_t) { return 1.0; };
    const DenseArray uniform = quadratic_kernel_attention(Q, K, V, ones, 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0;
        for (std::size_t j = 0; j < 5; ++j) mean += V.at2(j, c);
        mean /= 5.0;
        for (std::size_t i = 0; i < 5; ++i)
            CHECK(uniform.at2(i, c) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("exp(q.k) kernel reproduces un-scaled softmax attention") {
    Rng rng(11);
    const DenseArray Q = DenseArray::randn({4, 8}, rng, 0.5);
    const DenseArray K = DenseArray::randn({4, 8}, rng, 0.5);
    const DenseArray V = DenseArray::randn({4, 8}, rng);
    auto expdot = [](const double* q, const double* k, std::size_t d) {
        double t = 0;
        for (std::size_t i = 0; i < d; ++i) t += q[i] * k[i];
        return std::exp(t);
    };
    const DenseArray out = quadratic_kernel_attention(Q, K, V, expdot, 0.0);

    // Reference: softmax over rows of QK^T without temperature.
    for (std::size_t i = 0; i < 4; ++i) {
        double scores[4];
        double mx = -1e300;
        for (std::size_t j = 0; j < 4; ++j) {
            double t = 0;
            for (std::size_t c = 0; c < 8; ++c) t += Q.at2(i, c) * K.at2(j, c);
            scores[j] = t;
            mx = std::max(mx, t);
        }
        double z = 0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            z += s;
        }
        for (std::size_t c = 0; c < 8; ++c) {
            double want = 0;
            for (std::size_t j = 0; j < 4; ++j) want += scores[j] / z * V.at2(j, c);
            CHECK(std::abs(out.at2(i, c) - want) <= 1e-10);
        }
    }
}

TEST_CASE("zero kernel row with epsilon 0 reports a division error") {
    const DenseArray Q({1, 2}, {1.0, 0.0});
    const DenseArray K({1, 2}, {1.0, 0.0});
    const DenseArray V({1, 1}, {5.0});
    auto zero = [](const double*, const double*, std::size_t) { return 0.0; };
    CHECK_THROWS_AS(quadratic_kernel_attention(Q, K, V, zero, 0.0), DataError);
    // With the signed stabilizer the same call succeeds.
    const DenseArray out = quadratic_kernel_attention(Q, K, V, zero, 1e-6);
    CHECK(out[0] == 0.0);
}

TEST_CASE("linear path agrees with the quadratic oracle") {
    const std::size_t L = 64, d = 8, dv = 4, m = 16;
    for (FeatureKind kind : {FeatureKind::Rks, FeatureKind::Prf}) {
        FeatureMapSpec spec{kind, m, 1e-6, 30.0, false};
        const FrequencyMatrix omega = normal_omega(m, d, 2025);
        Rng rng(kind == FeatureKind::Rks ? 41 : 42);
        const DenseArray Q = DenseArray::randn({L, d}, rng, 0.5);
        const DenseArray K = DenseArray::randn({L, d}, rng, 0.5);
        const DenseArray V = DenseArray::randn({L, dv}, rng);
        const DenseArray lin = linear_kernel_attention(Q, K, V, spec, omega);
        const DenseArray quad =
            quadratic_kernel_attention(Q, K, V, feature_kernel(spec, omega), spec.epsilon);
        double max_diff = 0;
        for (std::size_t i = 0; i < lin.size(); ++i)
            max_diff = std::max(max_diff, std::abs(lin[i] - quad[i]));
        CHECK(max_diff <= 1e-8);
    }
}

TEST_CASE("linear attention with L=1 returns the single value row") {
    FeatureMapSpec spec{FeatureKind::Prf, 8, 0.0, 30.0, false};
    const FrequencyMatrix omega = normal_omega(8, 3, 5);
    Rng rng(6);
    const DenseArray Q = DenseArray::randn({1, 3}, rng);
    const DenseArray K = DenseArray::randn({1, 3}, rng);
    const DenseArray V = DenseArray::randn({1, 5}, rng);
    const DenseArray out = linear_kernel_attention(Q, K, V, spec, omega);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(out[i] == doctest::Approx(V[i]).epsilon(1e-12));
}

TEST_CASE("PRF outputs stay in the convex hull of the value rows") {
    FeatureMapSpec spec{FeatureKind::Prf, 16, 1e-6, 30.0, false};
    const FrequencyMatrix omega = normal_omega(16, 4, 7);
    Rng rng(8);
    const DenseArray Q = DenseArray::randn({24, 4}, rng, 0.5);
    const DenseArray K = DenseArray::randn({24, 4}, rng, 0.5);
    const DenseArray V = DenseArray::randn({24, 1}, rng);
    double lo = 1e300, hi = -1e300;
    for (std::size_t j = 0; j < 24; ++j) {
        lo = std::min(lo, V[j]);
        hi = std::max(hi, V[j]);
    }
    const DenseArray out = linear_kernel_attention(Q, K, V, spec, omega);
    for (std::size_t i = 0; i < 24; ++i) {
        CHECK(out[i] >= lo - 1e-9);
        CHECK(out[i] <= hi + 1e-9);
    }
}

TEST_CASE("causal attention: first row is v0, oracle agreement, streaming equals recompute") {
    const std::size_t L = 32, d = 6, dv = 3, m = 12;
    FeatureMapSpec spec{FeatureKind::Prf, m, 0.0, 30.0, false};
    const FrequencyMatrix omega = normal_omega(m, d, 9);
    Rng rng(10);
    const DenseArray Q = DenseArray::randn({L, d}, rng, 0.5);
    const DenseArray K = DenseArray::randn({L, d}, rng, 0.5);
    const DenseArray V = DenseArray::randn({L, dv}, rng);

    const DenseArray out = causal_linear_attention(Q, K, V, spec, omega);
    for (std::size_t c = 0; c < dv; ++c)
        CHECK(out.at2(0, c) == doctest::Approx(V.at2(0, c)).epsilon(1e-12));

    const DenseArray oracle = quadratic_kernel_attention(Q, K, V, feature_kernel(spec, omega),
                                                         spec.epsilon, nullptr, /*causal=*/true);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(std::abs(out[i] - oracle[i]) <= 1e-8);

    // Recompute-from-scratch at each prefix matches the streaming result.
    for (std::size_t i = 0; i < L; ++i) {
        DenseArray Qi({1, d}), sub_q({i + 1, d}), sub_v({i + 1, dv});
        std::copy_n(Q.data() + i * d, d, Qi.data());
        DenseArray Ki({i + 1, d});
        std::copy_n(K.data(), (i + 1) * d, Ki.data());
        std::copy_n(V.data(), (i + 1) * dv, sub_v.data());
        const DenseArray row = linear_kernel_attention(Qi, Ki, sub_v, spec, omega);
        for (std::size_t c = 0; c < dv; ++c)
            CHECK(std::abs(row[c] - out.at2(i, c)) <= 1e-12);
    }
}

TEST_CASE("softmax attention baseline basics") {
    Rng rng(12);
    const DenseArray V1 = DenseArray::randn({1, 4}, rng);
    const DenseArray out1 = softmax_attention(DenseArray({1, 3}, {1, 2, 3}),
                                              DenseArray({1, 3}, {0, 1, 0}), V1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out1[i] == doctest::Approx(V1[i]));

    const DenseArray Q0({3, 2});  // zero queries -> uniform rows
    const DenseArray K = DenseArray::randn({3, 2}, rng);
    const DenseArray V = DenseArray::randn({3, 2}, rng);
    const DenseArray out = softmax_attention(Q0, K, V);
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0;
        for (std::size_t j = 0; j < 3; ++j) mean += V.at2(j, c);
        mean /= 3.0;
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(out.at2(i, c) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("linear attention auxiliary storage is independent of L") {
    FeatureMapSpec spec{FeatureKind::Rks, 32, 1e-6, 30.0, false};
    const FrequencyMatrix omega = normal_omega(32, 8, 13);
    std::vector<std::size_t> peaks;
    for (std::size_t L : {128u, 512u, 2048u}) {
        Rng rng(L);
        const DenseArray Q = DenseArray::randn({L, 8}, rng, 0.5);
        const DenseArray K = DenseArray::randn({L, 8}, rng, 0.5);
        const DenseArray V = DenseArray::randn({L, 4}, rng);
        DenseArray out({L, 4});
        AllocCounter::enable();
        linear_kernel_attention_into(Q, K, V, spec, omega, out);
        peaks.push_back(AllocCounter::peak_bytes());
        AllocCounter::disable();
    }
    CHECK(peaks[0] == peaks[1]);
    CHECK(peaks[1] == peaks[2]);
    // Accumulators: F*dv + F + F doubles.
    const std::size_t f = 64;
    CHECK(peaks[0] == (f * 4 + f + f) * sizeof(double));
}

TEST_CASE("softmax attention auxiliary storage grows quadratically") {
    std::vector<std::size_t> peaks;
    for (std::size_t L : {128u, 256u}) {
        Rng rng(L);
        const DenseArray Q = DenseArray::randn({L, 8}, rng);
        const DenseArray K = DenseArray::randn({L, 8}, rng);
        const DenseArray V = DenseArray::randn({L, 4}, rng);
        DenseArray out({L, 4});
        AllocCounter::enable();
        softmax_attention_into(Q, K, V, out);
        peaks.push_back(AllocCounter::peak_bytes());
        AllocCounter::disable();
    }
    CHECK(peaks[1] == 4 * peaks[0]);
}

TEST_CASE("non-causal attention is permutation equivariant") {
    const std::size_t L = 10, d = 4, dv = 3, m = 8;
    FeatureMapSpec spec{FeatureKind::Prf, m, 1e-6, 30.0, false};
    const FrequencyMatrix omega = normal_omega(m, d, 20);
    Rng rng(21);
    const DenseArray Q = DenseArray::randn({L, d}, rng, 0.5);
    const DenseArray K = DenseArray::randn({L, d}, rng, 0.5);
    const DenseArray V = DenseArray::randn({L, dv}, rng);
    const DenseArray base = linear_kernel_attention(Q, K, V, spec, omega);

    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng prng(22);
    for (std::size_t i = L; i > 1; --i) std::swap(perm[i - 1], perm[prng.below(i)]);
    DenseArray Qp({L, d}), Kp({L, d}), Vp({L, dv});
    for (std::size_t i = 0; i < L; ++i) {
        std::copy_n(Q.data() + perm[i] * d, d, Qp.data() + i * d);
        std::copy_n(K.data() + perm[i] * d, d, Kp.data() + i * d);
        std::copy_n(V.data() + perm[i] * dv, dv, Vp.data() + i * dv);
    }
    const DenseArray permuted = linear_kernel_attention(Qp, Kp, Vp, spec, omega);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dv; ++c)
            CHECK(std::abs(permuted.at2(i, c) - base.at2(perm[i], c)) <= 1e-10);
}

TEST_CASE("near-zero denominator events are tallied") {
    FeatureMapSpec spec{FeatureKind::Rks, 2, 1e-6, 30.0, false};
    FrequencyMatrix omega;
    omega.rows = DenseArray({2, 1}, {3.14159265358979, 9.42477796076938});
    // q - k = 0.5 makes the kernel cos(pi/2) + cos(3pi/2) = 0 exactly.
    const DenseArray Q({1, 1}, {0.25});
    const DenseArray K({1, 1}, {-0.25});
    const DenseArray V({1, 1}, {1.0});
    AttentionDiagnostics diag;
    linear_kernel_attention(Q, K, V, spec, omega, &diag);
    CHECK(diag.near_zero_denominators >= 1);
}

TEST_CASE("tape attention agrees with the streaming path and differentiates") {
    const std::size_t B = 2, L = 8, d = 4, dv = 3, m = 6;
    for (FeatureKind kind : {FeatureKind::Rks, FeatureKind::Prf}) {
        FeatureMapSpec spec{kind, m, 1e-6, 30.0, false};
        const FrequencyMatrix omega = normal_omega(m, d, 30 + static_cast<int>(kind));
        Rng rng(31);
        std::vector<DenseArray> params = {DenseArray::randn({B * L, d}, rng, 0.5),
                                          DenseArray::randn({B * L, d}, rng, 0.5),
                                          DenseArray::randn({B * L, dv}, rng),
                                          omega.rows};
        auto f = [&](const std::vector<DenseArray>& p, std::vector<DenseArray>* grads) {
            Tape t;
            Var q = t.leaf(p[0]);
            Var k = t.leaf(p[1]);
            Var v = t.leaf(p[2]);
            Var om = t.leaf(p[3]);
            Var pq = matmul(q, om, false, true);
            Var pk = matmul(k, om, false, true);
            Var phi_q = feature_rows(q, pq, spec);
            Var phi_k = feature_rows(k, pk, spec);
            Var out = linear_attention_rows(phi_q, phi_k, v, B, L, spec.epsilon);
            Var loss = sum_all(mul(out, out));
            if (grads) {
                t.backward(loss);
                for (Var vv : {q, k, v, om}) grads->push_back(vv.grad());
            }
            return loss.value().scalar_value();
        };
        // Values agree with the per-sequence streaming implementation.
        {
            Tape t;
            Var q = t.leaf(params[0]), k = t.leaf(params[1]), v = t.leaf(params[2]),
                om = t.leaf(params[3]);
            Var out = linear_attention_rows(feature_rows(q, matmul(q, om, false, true), spec),
                                            feature_rows(k, matmul(k, om, false, true), spec),
                                            v, B, L, spec.epsilon);
            for (std::size_t b = 0; b < B; ++b) {
                DenseArray Qb({L, d}), Kb({L, d}), Vb({L, dv});
                std::copy_n(params[0].data() + b * L * d, L * d, Qb.data());
                std::copy_n(params[1].data() + b * L * d, L * d, Kb.data());
                std::copy_n(params[2].data() + b * L * dv, L * dv, Vb.data());
                const DenseArray want = linear_kernel_attention(Qb, Kb, Vb, spec, omega);
                for (std::size_t i = 0; i < L * dv; ++i)
                    CHECK(std::abs(out.value()[b * L * dv + i] - want[i]) <= 1e-10);
            }
        }
        CHECK(testing::check_gradients(params, f).max_rel_err <= 1e-3);
    }
}
