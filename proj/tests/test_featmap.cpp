#include <doctest.h>

#include <cmath>

#include "klab/featmap.hpp"
#include "test_support.hpp"

using namespace klab;

namespace {

FrequencyMatrix normal_omega(std::size_t m, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    FrequencyMatrix fm;
    fm.rows = DenseArray::randn({m, dim}, rng);
    return fm;
}

double gaussian_kernel(const DenseArray& q, const DenseArray& k) {
    double d2 = 0;
    for (std::size_t i = 0; i < q.size(); ++i) d2 += (q[i] - k[i]) * (q[i] - k[i]);
    return std::exp(-0.5 * d2);
}

}  // namespace

TEST_CASE("rks map with zero frequencies is (1, 0) scaled") {
    FrequencyMatrix fm;
    fm.rows = DenseArray({1, 3});
    const DenseArray phi = rks_map(DenseArray({3}, {0.3, -2.0, 5.0}), fm);
    REQUIRE(phi.size() == 2);
    CHECK(phi[0] == 1.0);
    CHECK(phi[1] == 0.0);
}

TEST_CASE("rks self-inner-product is exactly one") {
    FeatureMapSpec spec{FeatureKind::Rks, 32, 1e-6, 30.0, false};
    const FrequencyMatrix fm = normal_omega(32, 4, 17);
    Rng rng(18);
    for (int i = 0; i < 200; ++i) {
        const DenseArray x = DenseArray::randn({4}, rng, 2.5);
        CHECK(std::abs(kernel_estimate(x, x, spec, fm) - 1.0) <= 1e-12);
    }
}

TEST_CASE("rks estimate stays within [-1, 1]") {
    FeatureMapSpec spec{FeatureKind::Rks, 16, 1e-6, 30.0, false};
    const FrequencyMatrix fm = normal_omega(16, 3, 4);
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        const DenseArray q = DenseArray::randn({3}, rng, 2.0);
        const DenseArray k = DenseArray::randn({3}, rng, 2.0);
        const double est = kernel_estimate(q, k, spec, fm);
        CHECK(est <= 1.0 + 1e-12);
        CHECK(est >= -1.0 - 1e-12);
    }
}

TEST_CASE("prf map at the origin is uniform with unit self-product") {
    const std::size_t m = 25;
    const FrequencyMatrix fm = normal_omega(m, 3, 7);
    const DenseArray phi = prf_map(DenseArray({3}), fm);
    const double expected = 1.0 / std::sqrt(static_cast<double>(m));
    for (std::size_t i = 0; i < m; ++i) CHECK(phi[i] == expected);
    FeatureMapSpec spec{FeatureKind::Prf, m, 1e-6, 30.0, false};
    const DenseArray zero({3});
    CHECK(kernel_estimate(zero, zero, spec, fm) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("prf features are strictly positive for any finite input") {
    const FrequencyMatrix fm = normal_omega(12, 3, 8);
    Rng rng(9);
    for (int i = 0; i < 300; ++i) {
        const DenseArray x = DenseArray::randn({3}, rng, 5.0);
        const DenseArray phi = prf_map(x, fm);
        for (std::size_t j = 0; j < phi.size(); ++j) CHECK(phi[j] > 0.0);
    }
    // Extreme inputs hit the exponent clamp but stay positive and finite.
    const DenseArray huge({3}, {40.0, -35.0, 50.0});
    const DenseArray phi = prf_map(huge, fm);
    for (std::size_t j = 0; j < phi.size(); ++j) {
        CHECK(phi[j] > 0.0);
        CHECK(std::isfinite(phi[j]));
    }
}

TEST_CASE("both maps reproduce the Gaussian kernel at M = 2^16") {
    const std::size_t m = 1u << 16;
    const DenseArray q({2}, {1.0, 0.0});
    const DenseArray k({2}, {0.0, 1.0});
    const double target = std::exp(-1.0);
    const FrequencyMatrix fm = normal_omega(m, 2, 271828);

    // Mean and spread of the per-sample kernel terms give the MC error bar.
    double sum_rks = 0, sq_rks = 0, sum_prf = 0, sq_prf = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* w = fm.rows.data() + i * 2;
        const double t_rks = std::cos(w[0] * (q[0] - k[0]) + w[1] * (q[1] - k[1]));
        const double t_prf = std::exp(w[0] * (q[0] + k[0]) + w[1] * (q[1] + k[1]) - 2.0);
        sum_rks += t_rks;
        sq_rks += t_rks * t_rks;
        sum_prf += t_prf;
        sq_prf += t_prf * t_prf;
    }
    const double n = static_cast<double>(m);
    const double mean_rks = sum_rks / n, mean_prf = sum_prf / n;
    const double se_rks = std::sqrt((sq_rks / n - mean_rks * mean_rks) / n);
    const double se_prf = std::sqrt((sq_prf / n - mean_prf * mean_prf) / n);
    CHECK(std::abs(mean_rks - target) <= 3.0 * se_rks);
    CHECK(std::abs(mean_prf - target) <= 3.0 * se_prf);

    // The feature-map surfaces agree with the per-sample formulas.
    FeatureMapSpec rks{FeatureKind::Rks, m, 1e-6, 30.0, false};
    FeatureMapSpec prf{FeatureKind::Prf, m, 1e-6, 30.0, false};
    CHECK(kernel_estimate(q, k, rks, fm) == doctest::Approx(mean_rks).epsilon(1e-10));
    CHECK(kernel_estimate(q, k, prf, fm) == doctest::Approx(mean_prf).epsilon(1e-10));
}

TEST_CASE("averaging over 200 independent draws converges to the kernel") {
    const std::size_t m = 64;
    Rng rng(31);
    const DenseArray q = DenseArray::randn({3}, rng, 0.6);
    const DenseArray k = DenseArray::randn({3}, rng, 0.6);
    const double target = gaussian_kernel(q, k);
    FeatureMapSpec spec{FeatureKind::Rks, m, 1e-6, 30.0, false};

    const int draws = 200;
    double sum = 0, sq = 0;
    for (int r = 0; r < draws; ++r) {
        const FrequencyMatrix fm = normal_omega(m, 3, derive_seed(99, r));
        const double est = kernel_estimate(q, k, spec, fm);
        sum += est;
        sq += est * est;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sq / draws - mean * mean) / draws);
    CHECK(std::abs(mean - target) <= 3.0 * se);
}

TEST_CASE("unbiasedness: 500 draws at M=64 cover 100 random pairs at 4 sigma") {
    const std::size_t m = 64;
    const int draws = 500;
    Rng pair_rng(555);
    int failures = 0;
    for (int pair = 0; pair < 100; ++pair) {
        const DenseArray q = DenseArray::randn({2}, pair_rng, 0.7);
        const DenseArray k = DenseArray::randn({2}, pair_rng, 0.7);
        const double target = gaussian_kernel(q, k);
        FeatureMapSpec spec{pair % 2 == 0 ? FeatureKind::Rks : FeatureKind::Prf, m, 1e-6, 30.0,
                            false};
        double sum = 0, sq = 0;
        for (int r = 0; r < draws; ++r) {
            const FrequencyMatrix fm = normal_omega(m, 2, derive_seed(1000 + pair, r));
            const double est = kernel_estimate(q, k, spec, fm);
            sum += est;
            sq += est * est;
        }
        const double mean = sum / draws;
        const double se = std::sqrt((sq / draws - mean * mean) / draws);
        if (std::abs(mean - target) > 4.0 * se) ++failures;
    }
    CHECK(failures <= 1);  // 99% of pairs within 4 standard errors
}

TEST_CASE("feature map gradients w.r.t. inputs match finite differences") {
    const std::size_t m = 6, dim = 3, rows = 4;
    Rng rng(21);
    const DenseArray omega_val = DenseArray::randn({m, dim}, rng);
    std::vector<DenseArray> params = {DenseArray::randn({rows, dim}, rng, 0.8),
                                      omega_val};
    for (FeatureKind kind : {FeatureKind::Rks, FeatureKind::Prf}) {
        FeatureMapSpec spec{kind, m, 1e-6, 30.0, false};
        auto f = [&](const std::vector<DenseArray>& p, std::vector<DenseArray>* grads) {
            Tape t;
            Var x = t.leaf(p[0]);
            Var om = t.leaf(p[1]);
            Var proj = matmul(x, om, false, true);
            Var phi = feature_rows(x, proj, spec);
            Var loss = sum_all(mul(phi, phi));
            if (grads) {
                t.backward(loss);
                grads->push_back(x.grad());
                grads->push_back(om.grad());
            }
            return loss.value().scalar_value();
        };
        CHECK(testing::check_gradients(params, f).max_rel_err <= 1e-3);
    }
}

TEST_CASE("dimension mismatches are rejected") {
    const FrequencyMatrix fm = normal_omega(4, 3, 2);
    CHECK_THROWS_AS(rks_map(DenseArray({2}), fm), DimensionError);
    CHECK_THROWS_AS(prf_map(DenseArray({5}), fm), DimensionError);
    FeatureMapSpec spec{FeatureKind::Rks, 8, 1e-6, 30.0, false};  // wrong M
    CHECK_THROWS_AS(kernel_estimate(DenseArray({3}), DenseArray({3}), spec, fm),
                    DimensionError);
}

TEST_CASE("spec validation rejects bad fields") {
    FeatureMapSpec bad_m{FeatureKind::Rks, 0, 1e-6, 30.0, false};
    CHECK_THROWS_AS(bad_m.validate(), ContractError);
    FeatureMapSpec bad_eps{FeatureKind::Rks, 4, -1.0, 30.0, false};
    CHECK_THROWS_AS(bad_eps.validate(), ContractError);
    FeatureMapSpec bad_clamp{FeatureKind::Prf, 4, 0.0, 0.0, false};
    CHECK_THROWS_AS(bad_clamp.validate(), ContractError);
}

TEST_CASE("half-norm variant approximates the softmax kernel normalizer") {
    // With |x|^2/2 the inner product estimates exp(q.k) * exp(-(|q|^2+|k|^2)/2)
    // = exp(-|q-k|^2/2) as well, but through positive features of the softmax
    // form; at the origin both coincide.
    const std::size_t m = 1u << 14;
    const FrequencyMatrix fm = normal_omega(m, 2, 777);
    const DenseArray q({2}, {0.6, -0.2});
    const DenseArray k({2}, {-0.1, 0.4});
    FeatureMapSpec spec{FeatureKind::Prf, m, 1e-6, 30.0, true};
    const double est = kernel_estimate(q, k, spec, fm);
    const double target = gaussian_kernel(q, k);
    CHECK(est == doctest::Approx(target).epsilon(0.05));
}
