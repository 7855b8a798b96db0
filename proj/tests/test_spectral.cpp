#include <doctest.h>

#include <cmath>
#include <set>

#include "klab/featmap.hpp"
#include "klab/spectral.hpp"
#include "klab/wht.hpp"
#include "test_support.hpp"

using namespace klab;

TEST_CASE("gmm_sample with zero scale returns the means") {
    GmmParams p;
    p.components = 1;
    p.dim = 2;
    p.means = {DenseArray({2}, {2.0, -1.0})};
    p.scales = {DenseArray({2, 2})};
    const FrequencyMatrix fm = gmm_sample(p, 5, 99);
    CHECK(fm.count() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(fm.rows.at2(i, 0) == 2.0);
        CHECK(fm.rows.at2(i, 1) == -1.0);
    }
}

TEST_CASE("gmm_sample symmetric pair with zero scales, component order") {
    GmmParams p;
    p.components = 2;
    p.dim = 2;
    p.means = {DenseArray({2}, {1.0, 0.0}), DenseArray({2}, {-1.0, 0.0})};
    p.scales = {DenseArray({2, 2}), DenseArray({2, 2})};
    const FrequencyMatrix fm = gmm_sample(p, 4, 1);
    REQUIRE(fm.count() == 4);
    CHECK(fm.rows.at2(0, 0) == 1.0);
    CHECK(fm.rows.at2(1, 0) == 1.0);
    CHECK(fm.rows.at2(2, 0) == -1.0);
    CHECK(fm.rows.at2(3, 0) == -1.0);
}

TEST_CASE("gmm_sample rejects more components than samples") {
    Rng rng(3);
    GmmParams p = GmmParams::init(5, 2, rng);
    CHECK_THROWS_AS(gmm_sample(p, 3, 1), ContractError);
}

TEST_CASE("uneven component split gives the first components one extra row") {
    const auto counts = gmm_component_counts(3, 8);
    CHECK(counts == std::vector<std::size_t>{3, 3, 2});
    const auto even = gmm_component_counts(2, 8);
    CHECK(even == std::vector<std::size_t>{4, 4});
}

TEST_CASE("gmm_sample is bit-reproducible and seed-sensitive") {
    Rng rng(8);
    GmmParams p = GmmParams::init(2, 3, rng);
    const FrequencyMatrix a = gmm_sample(p, 10, 1234);
    const FrequencyMatrix b = gmm_sample(p, 10, 1234);
    const FrequencyMatrix c = gmm_sample(p, 10, 1235);
    REQUIRE(a.count() == b.count());
    bool identical = true, differs = false;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        identical = identical && a.rows[i] == b.rows[i];
        differs = differs || a.rows[i] != c.rows[i];
    }
    CHECK(identical);
    CHECK(differs);
}

TEST_CASE("standard-normal gmm covariance approaches identity at M = 2^16") {
    GmmParams p;
    p.components = 1;
    p.dim = 2;
    p.means = {DenseArray({2})};
    DenseArray I({2, 2});
    I.at2(0, 0) = I.at2(1, 1) = 1.0;
    p.scales = {I};
    const std::size_t m = 1u << 16;
    const FrequencyMatrix fm = gmm_sample(p, m, 2024);
    double mean[2] = {0, 0};
    for (std::size_t i = 0; i < m; ++i)
        for (int j = 0; j < 2; ++j) mean[j] += fm.rows.at2(i, j);
    for (double& v : mean) v /= static_cast<double>(m);
    double cov[3] = {0, 0, 0};  // xx, yy, xy
    for (std::size_t i = 0; i < m; ++i) {
        const double dx = fm.rows.at2(i, 0) - mean[0];
        const double dy = fm.rows.at2(i, 1) - mean[1];
        cov[0] += dx * dx;
        cov[1] += dy * dy;
        cov[2] += dx * dy;
    }
    for (double& v : cov) v /= static_cast<double>(m);
    CHECK(std::abs(cov[0] - 1.0) <= 0.05);
    CHECK(std::abs(cov[1] - 1.0) <= 0.05);
    CHECK(std::abs(cov[2]) <= 0.05);
    CHECK(std::abs(mean[0]) <= 0.05);
    CHECK(std::abs(mean[1]) <= 0.05);
}

TEST_CASE("empirical mixture mean converges to the average of the means") {
    Rng rng(77);
    GmmParams p = GmmParams::init(2, 2, rng, 1.0);
    for (auto& s : p.scales)
        for (std::size_t i = 0; i < s.size(); ++i) s[i] *= 0.5;
    const std::size_t m = 1u << 16;
    const FrequencyMatrix fm = gmm_sample(p, m, 5);
    for (int j = 0; j < 2; ++j) {
        double emp = 0;
        for (std::size_t i = 0; i < m; ++i) emp += fm.rows.at2(i, j);
        emp /= static_cast<double>(m);
        const double expected = 0.5 * (p.means[0][j] + p.means[1][j]);
        CHECK(std::abs(emp - expected) <= 0.05);
    }
}

TEST_CASE("gmm reparameterization is differentiable w.r.t. means and scales") {
    Rng rng(15);
    GmmParams p = GmmParams::init(2, 3, rng, 0.5);
    const auto noise = gmm_noise(p, 6, 42);
    std::vector<DenseArray> params = {p.means[0], p.means[1], p.scales[0], p.scales[1]};
    auto f = [&](const std::vector<DenseArray>& q, std::vector<DenseArray>* grads) {
        Tape t;
        GmmVars vars;
        vars.means = {t.leaf(q[0]), t.leaf(q[1])};
        vars.scales = {t.leaf(q[2]), t.leaf(q[3])};
        Var omega = gmm_frequencies(t, vars, noise);
        Var loss = sum_all(mul(omega, sin(omega)));
        if (grads) {
            t.backward(loss);
            for (Var v : {vars.means[0], vars.means[1], vars.scales[0], vars.scales[1]})
                grads->push_back(v.grad());
        }
        return loss.value().scalar_value();
    };
    CHECK(testing::check_gradients(params, f).max_rel_err <= 1e-3);
}

// ---- FastFood ---------------------------------------------------------------

TEST_CASE("fast WHT of a unit impulse is the all-ones row") {
    DenseArray x({4}, {1, 0, 0, 0});
    fwht(x.data(), 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(x[i] == 1.0);
}

TEST_CASE("fwht rejects non-power-of-two lengths") {
    DenseArray x({6});
    CHECK_THROWS_AS(fwht(x.data(), 6), DimensionError);
}

TEST_CASE("identity-factor FastFood at d=4 is 2I") {
    FastFoodParams p;
    p.dim_input = 4;
    p.dim_padded = 4;
    p.sigma = 1.0;
    FastFoodBlock b;
    b.s_diag = DenseArray::full({4}, 1.0);
    b.g_diag = DenseArray::full({4}, 1.0);
    b.b_diag = DenseArray::full({4}, 1.0);
    b.perm = {0, 1, 2, 3};
    p.blocks.push_back(b);

    const DenseArray y = fastfood_matrix_apply(p, DenseArray({4}, {1, 2, 3, 4}));
    REQUIRE(y.size() == 4);
    CHECK(y[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(y[2] == doctest::Approx(6.0).epsilon(1e-14));
    CHECK(y[3] == doctest::Approx(8.0).epsilon(1e-14));

    const DenseArray V = fastfood_dense_matrix(p);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(V.at2(i, j) == doctest::Approx(i == j ? 2.0 : 0.0).epsilon(1e-14));
}

TEST_CASE("fast apply equals the dense oracle") {
    for (std::size_t d : {4u, 8u, 16u, 64u}) {
        FastFoodParams p = FastFoodParams::init(d, 2 * next_pow2(d), 1000 + d);
        const DenseArray V = fastfood_dense_matrix(p);
        Rng rng(d);
        const DenseArray x = DenseArray::randn({d}, rng);
        const DenseArray fast = fastfood_matrix_apply(p, x);
        REQUIRE(fast.size() == V.rows());
        for (std::size_t i = 0; i < V.rows(); ++i) {
            double dense = 0;
            for (std::size_t j = 0; j < d; ++j) dense += V.at2(i, j) * x[j];
            CHECK(std::abs(fast[i] - dense) <= 1e-10);
        }
    }
}

TEST_CASE("fastfood apply is linear") {
    FastFoodParams p = FastFoodParams::init(8, 16, 77);
    Rng rng(4);
    const DenseArray x = DenseArray::randn({8}, rng);
    const DenseArray y = DenseArray::randn({8}, rng);
    const double alpha = 1.7, beta = -0.4;
    DenseArray combo({8});
    for (std::size_t i = 0; i < 8; ++i) combo[i] = alpha * x[i] + beta * y[i];
    const DenseArray lhs = fastfood_matrix_apply(p, combo);
    const DenseArray fx = fastfood_matrix_apply(p, x);
    const DenseArray fy = fastfood_matrix_apply(p, y);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        CHECK(std::abs(lhs[i] - (alpha * fx[i] + beta * fy[i])) <= 1e-10);
}

TEST_CASE("sample count must be a multiple of the padded dimension") {
    CHECK_THROWS_AS(FastFoodParams::init(8, 12, 1), ContractError);
    CHECK_NOTHROW(FastFoodParams::init(5, 16, 1));  // pads 5 -> 8, 16 = 2 blocks
}

TEST_CASE("fixed unit-scale FastFood approaches the Gaussian kernel with block count") {
    // With S = 1, sigma = 1, each row of V applied to any vector delta is
    // marginally N(0, |delta|^2), so the trigonometric estimate is unbiased
    // for exp(-|q - k|^2 / 2). Blocks are independent; the standard error
    // comes from the spread of per-block means.
    const std::size_t d = 16;
    Rng rng(2718);
    DenseArray q = DenseArray::randn({d}, rng);
    DenseArray k = DenseArray::randn({d}, rng);
    double nq = 0, nk = 0;
    for (std::size_t i = 0; i < d; ++i) {
        nq += q[i] * q[i];
        nk += k[i] * k[i];
    }
    for (std::size_t i = 0; i < d; ++i) {
        q[i] /= std::sqrt(nq);
        k[i] /= std::sqrt(nk);
    }
    double d2 = 0;
    for (std::size_t i = 0; i < d; ++i) d2 += (q[i] - k[i]) * (q[i] - k[i]);
    const double target = std::exp(-0.5 * d2);

    const std::size_t blocks = 512;
    FastFoodParams p = FastFoodParams::init(d, blocks * d, 31415);
    for (auto& blk : p.blocks) blk.s_diag = DenseArray::full({d}, 1.0);

    const DenseArray vq = fastfood_matrix_apply(p, q);
    const DenseArray vk = fastfood_matrix_apply(p, k);
    std::vector<double> block_means(blocks, 0.0);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t i = 0; i < d; ++i)
            block_means[b] += std::cos(vq[b * d + i] - vk[b * d + i]);
        block_means[b] /= static_cast<double>(d);
    }
    double mean = 0;
    for (double v : block_means) mean += v;
    mean /= static_cast<double>(blocks);
    double var = 0;
    for (double v : block_means) var += (v - mean) * (v - mean);
    var /= static_cast<double>(blocks - 1);
    const double se = std::sqrt(var / static_cast<double>(blocks));
    CHECK(std::abs(mean - target) <= 3.0 * se);
}

TEST_CASE("fastfood row projection differentiates w.r.t. the diagonals") {
    const std::size_t d = 4, m = 8, rows = 3;
    FastFoodParams p = FastFoodParams::init(d, m, 5);
    Rng rng(6);
    const DenseArray X = DenseArray::randn({rows, d}, rng);
    DenseArray s({m}), g({m}), b({m});
    std::vector<std::size_t> perm;
    for (std::size_t blk = 0; blk < p.blocks.size(); ++blk)
        for (std::size_t i = 0; i < d; ++i) {
            s[blk * d + i] = p.blocks[blk].s_diag[i];
            g[blk * d + i] = p.blocks[blk].g_diag[i];
            b[blk * d + i] = p.blocks[blk].b_diag[i];
            perm.push_back(p.blocks[blk].perm[i]);
        }
    std::vector<DenseArray> params = {s, g, b, X};
    auto f = [&](const std::vector<DenseArray>& q, std::vector<DenseArray>* grads) {
        Tape t;
        Var sv = t.leaf(q[0]), gv = t.leaf(q[1]), bv = t.leaf(q[2]), xv = t.leaf(q[3]);
        std::vector<Var> parts;
        Var xp = xv;  // d already a power of two
        for (std::size_t blk = 0; blk < 2; ++blk) {
            auto slice = [&](Var v) {
                return reshape(slice_cols(reshape(v, {1, m}), blk * d, (blk + 1) * d), {d});
            };
            std::vector<std::size_t> bperm(perm.begin() + blk * d, perm.begin() + (blk + 1) * d);
            Var h = diag_scale_cols(xp, slice(bv));
            h = hadamard_cols(h);
            h = permute_cols(h, bperm);
            h = diag_scale_cols(h, slice(gv));
            h = hadamard_cols(h);
            h = diag_scale_cols(h, slice(sv));
            parts.push_back(scale(h, 0.5));  // 1/sqrt(4)
        }
        Var proj = concat_cols(parts);
        Var loss = sum_all(mul(proj, sin(proj)));
        if (grads) {
            t.backward(loss);
            for (Var v : {sv, gv, bv, xv}) grads->push_back(v.grad());
        }
        return loss.value().scalar_value();
    };
    CHECK(testing::check_gradients(params, f).max_rel_err <= 1e-3);
}

// ---- generator ------------------------------------------------------------------

TEST_CASE("all-zero generator emits zero frequencies") {
    GeneratorParams p = GeneratorParams::init(3, 1);
    for (auto& layer : p.hidden) {
        layer.weight = DenseArray({3, 3});
        layer.bias = DenseArray({3});
        layer.bn_bias = DenseArray({3});
    }
    p.w_out = DenseArray({3, 3});
    p.b_out = DenseArray({3});
    const FrequencyMatrix fm = generator_sample(p, 4, 9);
    for (std::size_t i = 0; i < fm.rows.size(); ++i) CHECK(fm.rows[i] == 0.0);
}

TEST_CASE("generator output respects the scaled tanh range") {
    GeneratorParams p = GeneratorParams::init(4, 21);
    const double s = std::exp(p.log_out_scale.scalar_value());
    const FrequencyMatrix fm = generator_sample(p, 64, 33);
    for (std::size_t i = 0; i < fm.rows.size(); ++i) {
        CHECK(fm.rows[i] > -s);
        CHECK(fm.rows[i] < s);
    }

    GeneratorParams plain = GeneratorParams::init(4, 21, /*scaled_output=*/false);
    const FrequencyMatrix fm2 = generator_sample(plain, 64, 33);
    for (std::size_t i = 0; i < fm2.rows.size(); ++i) {
        CHECK(fm2.rows[i] > -1.0);
        CHECK(fm2.rows[i] < 1.0);
    }
}

TEST_CASE("generator_sample requires a batch for normalization statistics") {
    GeneratorParams p = GeneratorParams::init(3, 2);
    CHECK_THROWS_AS(generator_sample(p, 1, 7), ContractError);
}

TEST_CASE("generator gradients w.r.t. first-layer weights match finite differences") {
    GeneratorParams p = GeneratorParams::init(3, 55);
    const DenseArray noise = generator_noise(p, 6, 11);
    std::vector<DenseArray> params = {p.hidden[0].weight, p.hidden[0].bias,
                                      p.hidden[0].bn_gain, p.log_out_scale};
    auto f = [&](const std::vector<DenseArray>& q, std::vector<DenseArray>* grads) {
        Tape t;
        GeneratorVars vars;
        for (std::size_t j = 0; j < 4; ++j) {
            GeneratorLayerVars lv;
            lv.weight = j == 0 ? t.leaf(q[0]) : t.constant(p.hidden[j].weight);
            lv.bias = j == 0 ? t.leaf(q[1]) : t.constant(p.hidden[j].bias);
            lv.bn_gain = j == 0 ? t.leaf(q[2]) : t.constant(p.hidden[j].bn_gain);
            lv.bn_bias = t.constant(p.hidden[j].bn_bias);
            vars.hidden.push_back(lv);
        }
        vars.w_out = t.constant(p.w_out);
        vars.b_out = t.constant(p.b_out);
        vars.log_out_scale = t.leaf(q[3]);
        vars.scaled_output = true;
        Var omega = generator_frequencies(t, vars, noise);
        Var loss = sum_all(mul(omega, omega));
        if (grads) {
            t.backward(loss);
            grads->push_back(vars.hidden[0].weight.grad());
            grads->push_back(vars.hidden[0].bias.grad());
            grads->push_back(vars.hidden[0].bn_gain.grad());
            grads->push_back(vars.log_out_scale.grad());
        }
        return loss.value().scalar_value();
    };
    CHECK(testing::check_gradients(params, f).max_rel_err <= 1e-3);
}

// ---- resampling policy ------------------------------------------------------------

TEST_CASE("maybe_resample draws only on interval boundaries") {
    Rng rng(1);
    GmmParams p = GmmParams::init(1, 2, rng, 0.5);
    SamplerState state(p, 8, 100, 321);

    const FrequencyMatrix at100 = state.maybe_resample(100);
    CHECK(at100.drawn_at_step == 100);
    const DenseArray snapshot = at100.rows;

    const FrequencyMatrix& at101 = state.maybe_resample(101);
    CHECK(at101.drawn_at_step == 100);
    for (std::size_t i = 0; i < snapshot.size(); ++i) CHECK(at101.rows[i] == snapshot[i]);

    const FrequencyMatrix& at200 = state.maybe_resample(200);
    CHECK(at200.drawn_at_step == 200);
    bool changed = false;
    for (std::size_t i = 0; i < snapshot.size(); ++i)
        changed = changed || at200.rows[i] != snapshot[i];
    CHECK(changed);
}

TEST_CASE("interval of one redraws every step") {
    Rng rng(2);
    GmmParams p = GmmParams::init(1, 2, rng, 0.5);
    SamplerState state(p, 4, 1, 99);
    std::set<double> first_entries;
    for (std::uint64_t step = 0; step < 10; ++step)
        first_entries.insert(state.maybe_resample(step).rows[0]);
    CHECK(first_entries.size() == 10);
}

TEST_CASE("generative sampler shares one frequency draw across heads") {
    // Two heads of the same layer see the same matrix for the same step and
    // seed: the draw depends only on (params, seed, step).
    GeneratorParams p = GeneratorParams::init(3, 8);
    const FrequencyMatrix head_a = generator_sample(p, 16, 55);
    const FrequencyMatrix head_b = generator_sample(p, 16, 55);
    for (std::size_t i = 0; i < head_a.rows.size(); ++i)
        CHECK(head_a.rows[i] == head_b.rows[i]);
}
