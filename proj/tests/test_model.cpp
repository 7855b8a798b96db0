#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "klab/dataset.hpp"
#include "klab/experiments.hpp"
#include "klab/model.hpp"
#include "test_support.hpp"

using namespace klab;

namespace {

EncoderConfig tiny_config(const std::string& variant) {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 16;
    cfg.d_ff = 16;
    cfg.heads = 2;
    cfg.d_qk = 8;
    cfg.d_v = 8;
    cfg.input_dim = 3;
    cfg.max_len = 12;
    cfg.num_classes = 9;
    cfg.classifier_hidden = 16;
    cfg.variant = VariantSpec::parse(variant);
    cfg.featmap.kind = cfg.variant.featmap;
    cfg.featmap.samples = 8;
    cfg.gmm_components = 2;
    cfg.dropout = 0.0;
    return cfg;
}

DenseArray random_input(std::size_t batch, std::size_t L, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray x({batch, L, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return x;
}

}  // namespace

TEST_CASE("zero weights give uniform logits over the classes") {
    EncoderConfig cfg = tiny_config("gmm-rks");
    Encoder enc(cfg, 1, 2);
    for (Parameter* p : enc.params().all())
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.0;
    enc.maybe_resample(0);
    Tape tape;
    Rng rng(0);
    Var logits = enc.forward(tape, random_input(3, 6, 4), false, rng);
    REQUIRE(logits.value().shape() == std::vector<std::size_t>{3, 9});
    for (std::size_t i = 0; i < logits.value().size(); ++i) CHECK(logits.value()[i] == 0.0);
}

TEST_CASE("logits shape is (batch, 9) for every variant") {
    for (const char* variant : {"softmax", "gmm-rks", "gmm-prf", "fastfood-rks",
                                "fastfood-prf", "generative-rks", "generative-prf"}) {
        EncoderConfig cfg = tiny_config(variant);
        Encoder enc(cfg, 3, 4);
        enc.maybe_resample(0);
        Tape tape;
        Rng rng(0);
        Var logits = enc.forward(tape, random_input(2, 5, 9), false, rng);
        CHECK(logits.value().shape() == std::vector<std::size_t>{2, 9});
        CHECK(logits.value().all_finite());
    }
}

TEST_CASE("overlength input is rejected") {
    EncoderConfig cfg = tiny_config("gmm-rks");
    Encoder enc(cfg, 1, 2);
    enc.maybe_resample(0);
    Tape tape;
    Rng rng(0);
    CHECK_THROWS_AS(enc.forward(tape, random_input(1, cfg.max_len + 1, 3), false, rng),
                    DimensionError);
}

TEST_CASE("forward is deterministic with dropout disabled; dropout is seeded") {
    EncoderConfig cfg = tiny_config("generative-prf");
    Encoder enc(cfg, 5, 6);
    enc.maybe_resample(0);
    const DenseArray input = random_input(2, 6, 7);
    Rng r1(0), r2(0);
    Tape t1, t2;
    Var a = enc.forward(t1, input, false, r1);
    Var b = enc.forward(t2, input, false, r2);
    for (std::size_t i = 0; i < a.value().size(); ++i)
        CHECK(a.value()[i] == b.value()[i]);

    cfg.dropout = 0.3;
    Encoder enc2(cfg, 5, 6);
    enc2.maybe_resample(0);
    Rng d1(11), d2(11), d3(12);
    Tape t3, t4, t5;
    Var c = enc2.forward(t3, input, true, d1);
    Var d = enc2.forward(t4, input, true, d2);
    Var e = enc2.forward(t5, input, true, d3);
    bool same_seed_equal = true, diff_seed_equal = true;
    for (std::size_t i = 0; i < c.value().size(); ++i) {
        same_seed_equal = same_seed_equal && c.value()[i] == d.value()[i];
        diff_seed_equal = diff_seed_equal && c.value()[i] == e.value()[i];
    }
    CHECK(same_seed_equal);
    CHECK(!diff_seed_equal);
}

TEST_CASE("residual blocks preserve shape across layer counts") {
    for (std::size_t layers : {1u, 3u}) {
        EncoderConfig cfg = tiny_config("fastfood-prf");
        cfg.layers = layers;
        Encoder enc(cfg, 2, 3);
        enc.maybe_resample(0);
        Tape tape;
        Rng rng(0);
        Var logits = enc.forward(tape, random_input(2, 4, 1), false, rng);
        CHECK(logits.value().shape() == std::vector<std::size_t>{2, 9});
    }
}

TEST_CASE("encoder loss gradient matches finite differences on a 2-example batch") {
    // Finite differences over every parameter of a miniature encoder, one
    // configuration per attention family.
    for (const char* variant : {"gmm-rks", "fastfood-prf", "generative-rks", "softmax"}) {
        EncoderConfig cfg = tiny_config(variant);
        cfg.layers = 1;
        cfg.d_model = 6;
        cfg.d_ff = 6;
        cfg.heads = 1;
        cfg.d_qk = 4;
        cfg.d_v = 4;
        cfg.classifier_hidden = 5;
        cfg.featmap.samples = 4;
        cfg.max_len = 5;
        Encoder enc(cfg, 7, 8);
        enc.maybe_resample(0);
        const DenseArray input = random_input(2, 4, 17);
        const std::vector<int> labels = {1, 7};

        auto all_params = enc.params().all();
        std::vector<DenseArray> values;
        for (Parameter* p : all_params) values.push_back(p->value);
        auto f = [&](const std::vector<DenseArray>& vals, std::vector<DenseArray>* grads) {
            for (std::size_t i = 0; i < all_params.size(); ++i)
                all_params[i]->value = vals[i];
            Tape tape;
            Rng rng(0);
            Var loss = enc.loss(tape, input, labels, false, rng);
            if (grads) {
                tape.backward(loss);
                for (Parameter* p : all_params) grads->push_back(p->node.grad());
            }
            return loss.value().scalar_value();
        };
        const auto report = testing::check_gradients(values, f);
        INFO("variant ", variant, " coords ", report.coords_checked);
        CHECK(report.max_rel_err <= 1e-3);
        for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i]->value = values[i];
    }
}

TEST_CASE("adamw trivial updates") {
    Parameter p("w", DenseArray({2}, {1.0, -2.0}));
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    adamw_step(p, DenseArray({2}), cfg, 1);
    CHECK(p.value[0] == 1.0);
    CHECK(p.value[1] == -2.0);

    // Zero gradient with decay shrinks by (1 - lr * decay) per step.
    Parameter q("w", DenseArray({1}, {4.0}));
    AdamWConfig cfg2;
    cfg2.lr = 0.05;
    cfg2.weight_decay = 0.5;
    adamw_step(q, DenseArray({1}), cfg2, 1);
    CHECK(q.value[0] == doctest::Approx(4.0 * (1.0 - 0.05 * 0.5)).epsilon(1e-15));
    adamw_step(q, DenseArray({1}), cfg2, 2);
    CHECK(q.value[0] ==
          doctest::Approx(4.0 * (1.0 - 0.05 * 0.5) * (1.0 - 0.05 * 0.5)).epsilon(1e-15));
}

TEST_CASE("adamw three steps with constant unit gradient match the hand calculation") {
    // beta1 = 0.9, beta2 = 0.98, eps = 1e-9, lr = 0.01, no decay.
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.98;
    cfg.eps = 1e-9;
    cfg.weight_decay = 0.0;
    Parameter p("w", DenseArray({1}, {0.5}));
    const DenseArray g({1}, {1.0});

    double m = 0, v = 0, w = 0.5;
    for (int t = 1; t <= 3; ++t) {
        m = 0.9 * m + 0.1 * 1.0;
        v = 0.98 * v + 0.02 * 1.0;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.98, t));
        w -= 0.01 * (mhat / (std::sqrt(vhat) + 1e-9));
        adamw_step(p, g, cfg, static_cast<std::uint64_t>(t));
        CHECK(p.value[0] == doctest::Approx(w).epsilon(1e-15));
    }
}

TEST_CASE("non-finite gradient aborts training with a diagnostic") {
    Parameter p("w", DenseArray({1}, {1.0}));
    AdamWConfig cfg;
    CHECK_THROWS_AS(
        adamw_step(p, DenseArray({1}, {std::numeric_limits<double>::quiet_NaN()}), cfg, 1),
        DataError);
}

TEST_CASE("checkpoint round trip: save, load, one step equals uninterrupted run") {
    EncoderConfig cfg = tiny_config("gmm-prf");
    const SparsitySpec data_spec{0.5, 6, 64, 0.5, 3};
    const SparsityDataset ds = generate_sparsity_dataset(data_spec);
    const DenseArray input = encode_batch(ds.train, 0, 8);
    const std::vector<int> labels = encode_labels(ds.train, 0, 8);
    AdamWConfig opt;
    opt.lr = 1e-3;

    auto one_step = [&](Encoder& enc, std::uint64_t step, std::uint64_t adam_t, Rng& drop) {
        enc.maybe_resample(step);
        Tape tape;
        Var loss = enc.loss(tape, input, labels, true, drop);
        tape.backward(loss);
        for (Parameter* p : enc.params().all())
            adamw_step(*p, p->node.grad(), opt, adam_t + 1);
    };

    // Uninterrupted: two steps.
    Encoder enc_a(cfg, 11, 12);
    Rng drop_a(99);
    one_step(enc_a, 0, 0, drop_a);
    one_step(enc_a, 1, 1, drop_a);

    // Interrupted: one step, checkpoint, restore, one more step.
    Encoder enc_b(cfg, 11, 12);
    Rng drop_b(99);
    one_step(enc_b, 0, 0, drop_b);
    Checkpoint ck;
    enc_b.fill_checkpoint(ck);
    ck.step = 1;
    ck.adam_t = 1;
    ck.rng_states["dropout"] = drop_b.state();
    const std::string path = "test_roundtrip.ckpt";
    save_checkpoint(path, ck);

    const Checkpoint loaded = load_checkpoint(path);
    Encoder enc_c = Encoder::from_checkpoint(loaded);
    Rng drop_c(0);
    drop_c.set_state(loaded.rng_states.at("dropout"));
    one_step(enc_c, 1, loaded.adam_t, drop_c);

    auto pa = enc_a.params().all();
    auto pc = enc_c.params().all();
    REQUIRE(pa.size() == pc.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->name == pc[i]->name);
        for (std::size_t j = 0; j < pa[i]->value.size(); ++j)
            CHECK(pa[i]->value[j] == pc[i]->value[j]);
    }
    std::filesystem::remove(path);
}

TEST_CASE("truncated checkpoint reports a checksum error, foreign version is named") {
    EncoderConfig cfg = tiny_config("gmm-rks");
    Encoder enc(cfg, 1, 2);
    Checkpoint ck;
    enc.fill_checkpoint(ck);
    const std::string path = "test_trunc.ckpt";
    save_checkpoint(path, ck);

    // Truncate the file.
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), DataError);

    // Foreign version: rewrite the version field and recompute the checksum
    // by saving through a doctored writer is overkill; instead check the
    // code path by crafting a file via save + byte surgery on version and
    // accept either checksum or version errors naming the versions.
    std::filesystem::remove(path);
}

TEST_CASE("version mismatch names both versions") {
    // Hand-build a tiny file with version 99: magic + version + padding, then
    // correct FNV trailer so the version check is what fires.
    const char magic[8] = {'K', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
    std::vector<std::uint8_t> body(magic, magic + 8);
    const std::uint32_t version = 99;
    const std::uint8_t* vb = reinterpret_cast<const std::uint8_t*>(&version);
    body.insert(body.end(), vb, vb + 4);
    for (int i = 0; i < 16; ++i) body.push_back(0);  // step + adam_t
    for (int i = 0; i < 16; ++i) body.push_back(0);  // empty sections
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : body) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    const std::string path = "test_version.ckpt";
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(body.data()),
                  static_cast<std::streamsize>(body.size()));
        out.write(reinterpret_cast<const char*>(&h), 8);
    }
    bool threw = false;
    try {
        load_checkpoint(path);
    } catch (const DataError& e) {
        threw = true;
        const std::string msg = e.what();
        CHECK(msg.find("99") != std::string::npos);
        CHECK(msg.find("1") != std::string::npos);
    }
    CHECK(threw);
    std::filesystem::remove(path);
}

TEST_CASE("memorization floor: every variant drives training loss below 0.01") {
    // 32 fixed examples, full-batch steps; the budget is 2000 but tiny models
    // get there far sooner with a healthy learning rate.
    const SparsitySpec data_spec{0.5, 8, 128, 0.5, 21};
    const SparsityDataset ds = generate_sparsity_dataset(data_spec);
    const DenseArray input = encode_batch(ds.train, 0, 32);
    const std::vector<int> labels = encode_labels(ds.train, 0, 32);

    for (const char* variant : {"softmax", "gmm-rks", "gmm-prf", "fastfood-rks",
                                "fastfood-prf", "generative-rks", "generative-prf"}) {
        EncoderConfig cfg = tiny_config(variant);
        cfg.max_len = 10;
        cfg.resample_interval = 100;
        Encoder enc(cfg, 31, 32);
        AdamWConfig opt;
        opt.lr = 3e-3;
        opt.weight_decay = 0.0;
        Rng drop(1);
        double loss_value = 1e9;
        std::size_t steps = 0;
        for (; steps < 2000; ++steps) {
            enc.maybe_resample(steps);
            Tape tape;
            Var loss = enc.loss(tape, input, labels, true, drop);
            loss_value = loss.value().scalar_value();
            if (loss_value < 0.01) break;
            tape.backward(loss);
            for (Parameter* p : enc.params().all())
                adamw_step(*p, p->node.grad(), opt, steps + 1);
        }
        INFO("variant ", variant, " reached loss ", loss_value, " in ", steps, " steps");
        CHECK(loss_value < 0.01);
    }
}
