#include <doctest.h>

#include "kancal/optim.hpp"
#include "test_support.hpp"

using namespace kancal;

namespace {

/// Three separated blobs in the unit square scaled into [-1, 1].
Dataset blobs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const double cx[] = {-0.6, 0.6, 0.0}, cy[] = {-0.5, -0.5, 0.6};
    Dataset d;
    d.features = Matrix(static_cast<Eigen::Index>(n), 2);
    d.class_count = 3;
    for (std::size_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(i % 3);
        d.features(static_cast<Eigen::Index>(i), 0) = std::clamp(cx[k] + 0.12 * rng.normal(), -1.0, 1.0);
        d.features(static_cast<Eigen::Index>(i), 1) = std::clamp(cy[k] + 0.12 * rng.normal(), -1.0, 1.0);
        d.labels.push_back(k);
    }
    return d;
}

double train_accuracy(const Model& m, const Dataset& d) {
    const Labels pred = argmax_rows(predict_logits(m, d.features));
    double hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == d.labels[i];
    return hits / static_cast<double>(pred.size());
}

Model small_kan(std::uint64_t seed, int in = 2, int classes = 3) {
    Rng rng(seed);
    return make_kan({in, 8, classes}, Spec{-1, 1, 5, 3}, ShortcutKind::silu, rng);
}

Dataset synth_default(std::uint64_t seed) {
    SynthConfig c;
    c.seed = seed;
    Dataset d = synth_classification(c);
    standardize_to_range(d, {-1.0, 1.0});
    return d;
}

}  // namespace

TEST_CASE("adam_step") {
    SUBCASE("zero gradients leave parameters unchanged") {
        Matrix w = Matrix::Constant(2, 3, 0.7);
        AdamState st;
        for (int i = 0; i < 5; ++i) adam_step(st, {&w}, {Matrix::Zero(2, 3)}, 0.1);
        CHECK(w == Matrix::Constant(2, 3, 0.7));
        CHECK(st.step == 5);
    }
    SUBCASE("first step with unit gradient moves by about lr") {
        Matrix w = Matrix::Constant(1, 1, 0.0);
        AdamState st;
        adam_step(st, {&w}, {Matrix::Constant(1, 1, 1.0)}, 0.01);
        CHECK(w(0, 0) == doctest::Approx(-0.01 / (1 + 1e-8)).epsilon(1e-12));
    }
    SUBCASE("matches a scalar simulation on w squared") {
        Matrix w = Matrix::Constant(1, 1, 1.0);
        AdamState st;
        double ref = 1.0, m = 0, v = 0, prev = 1.0;
        for (int t = 1; t <= 10; ++t) {
            const double g = 2 * ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
            adam_step(st, {&w}, {Matrix::Constant(1, 1, 2 * w(0, 0))}, 0.1);
            CHECK(w(0, 0) == doctest::Approx(ref).epsilon(1e-14));
            CHECK(std::abs(w(0, 0)) < prev);
            prev = std::abs(w(0, 0));
        }
    }
    SUBCASE("shape mismatches are rejected") {
        Matrix w = Matrix::Zero(2, 2);
        AdamState st;
        CHECK_THROWS_AS(adam_step(st, {&w}, {Matrix::Zero(2, 3)}, 0.1), ConfigError);
        CHECK_THROWS_AS(adam_step(st, {&w}, {}, 0.1), ConfigError);
    }
}

TEST_CASE("project_tau") {
    CHECK(project_tau(-0.3, 0.05, 10) == 0.05);
    CHECK(project_tau(3.2, 0.05, 10) == 3.2);
    CHECK(project_tau(57, 0.05, 10) == 10);
    CHECK(project_tau(std::nan(""), 0.05, 10) == 0.05);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.tau0 = 20;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.tau_min = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    CHECK(c.learning_rate(10) == 1e-3);
    CHECK(c.learning_rate(11) == 1e-4);
    CHECK(c.tau_learning_rate() == 1e-3);
}

TEST_CASE("zero learning rates change nothing") {
    const Dataset d = blobs(90, 1);
    Model m = small_kan(2);
    const Model before = m;
    TrainConfig c;
    c.epochs = 3;
    c.lr = c.lr_after_decay = 0.0;
    c.lr_tau = 0.0;
    c.tsl_enabled = true;
    const TrainResult r = train(m, d, d, c);
    const auto a = m.parameters();
    const auto b = before.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
    CHECK(r.tau == 1.0);
}

TEST_CASE("separable 2-D blobs are learned") {
    const Dataset d = blobs(600, 3);
    Model m = small_kan(4);
    TrainConfig c;
    c.batch_size = 32;
    c.lr = 1e-2;
    c.lr_after_decay = 1e-3;
    const TrainResult r = train(m, d, d, c);
    CHECK(r.history.epochs.size() == 20);
    CHECK(train_accuracy(m, d) >= 0.95);
}

TEST_CASE("training is bit-identical for a fixed seed") {
    const Dataset d = synth_default(5);
    auto run = [&] {
        Model m = small_kan(6, 20, 3);
        TrainConfig c;
        c.epochs = 4;
        c.batch_size = 32;
        c.lr = 1e-2;
        c.tsl_enabled = true;
        c.seed = 11;
        return std::make_pair(train(m, d, d, c), m);
    };
    const auto [a, ma] = run();
    const auto [b, mb] = run();
    REQUIRE(a.history.epochs.size() == b.history.epochs.size());
    for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
        const EpochRecord &x = a.history.epochs[e], &y = b.history.epochs[e];
        CHECK(x.train_loss == y.train_loss);
        CHECK(x.tau == y.tau);
        CHECK(x.report.ece == y.report.ece);
        CHECK(x.report.smece == y.report.smece);
        CHECK(x.report.nll == y.report.nll);
    }
    for (std::size_t i = 0; i < ma.parameters().size(); ++i) CHECK(*ma.parameters()[i] == *mb.parameters()[i]);
}

TEST_CASE("tau stays in bounds after every step") {
    const Dataset d = synth_default(7);
    Rng fuzz(8);
    for (int trial = 0; trial < 12; ++trial) {
        TrainConfig c;
        c.epochs = 2;
        c.batch_size = 1 + static_cast<int>(fuzz.below(64));
        c.lr = fuzz.uniform(1e-4, 5e-2);
        c.lr_tau = std::pow(10.0, fuzz.uniform(-3, 1));
        c.tau_min = fuzz.uniform(0.05, 0.9);
        c.tau_max = fuzz.uniform(1.1, 10.0);
        c.tau0 = fuzz.uniform(c.tau_min, c.tau_max);
        c.tsl_enabled = true;
        c.seed = trial;
        Model m = small_kan(static_cast<std::uint64_t>(trial), 20, 3);
        long steps = 0;
        bool inside = true;
        train(m, d, d, c, [&](const StepInfo& s) {
            ++steps;
            inside = inside && s.tau >= c.tau_min && s.tau <= c.tau_max;
        });
        CAPTURE(trial);
        CHECK(inside);
        CHECK(steps == 2 * ((500 + c.batch_size - 1) / c.batch_size));
    }
}

TEST_CASE("tau is pinned without TSL") {
    const Dataset d = synth_default(9);
    Model m = small_kan(9, 20, 3);
    TrainConfig c;
    c.epochs = 2;
    c.lr_tau = 1.0;
    bool pinned = true;
    const TrainResult r = train(m, d, d, c, [&](const StepInfo& s) { pinned = pinned && s.tau == 1.0; });
    CHECK(pinned);
    CHECK(r.tau == 1.0);
}

TEST_CASE("epoch loss decreases for every loss kind") {
    const Dataset d = synth_default(10);
    for (const LossKind& kind : {LossKind::ce(), LossKind::brier(), LossKind::focal(), LossKind::label_smooth(),
                                 LossKind::dual_focal(), LossKind::focal_calibration()}) {
        Model m = small_kan(12, 20, 3);
        TrainConfig c;
        c.batch_size = 32;
        c.lr = 1e-2;
        c.lr_after_decay = 1e-3;
        c.loss = kind;
        const TrainResult r = train(m, d, d, c);
        CAPTURE(kind.name());
        CHECK(r.history.epochs.back().train_loss < r.history.epochs.front().train_loss);
    }
}

TEST_CASE("learning rate drops after the decay epoch") {
    const Dataset d = blobs(60, 2);
    Model m = small_kan(3);
    TrainConfig c;
    c.epochs = 4;
    c.decay_epoch = 2;
    const TrainResult r = train(m, d, d, c);
    CHECK(r.history.epochs[1].lr == 1e-3);
    CHECK(r.history.epochs[2].lr == 1e-4);
    CHECK(r.history.epochs[3].lr == 1e-4);
}

TEST_CASE("training errors") {
    Model m = small_kan(1);
    TrainConfig c;
    c.epochs = 1;
    Dataset empty;
    empty.features = Matrix(0, 2);
    empty.class_count = 3;
    CHECK_THROWS_AS(train(m, empty, blobs(30, 1), c), DataError);
    CHECK_THROWS_AS(train(m, synth_default(1), synth_default(1), c), ConfigError);

    // Exploding step sizes overflow the logits.
    c.lr = 1e300;
    c.epochs = 3;
    CHECK_THROWS_AS(train(m, blobs(30, 1), blobs(30, 1), c), DivergenceError);
}

// Known to fail at this scale: tau descends on the training loss and sharpens
// as the training set is fitted. Reported, not enforced.
TEST_CASE("TSL does not worsen median test ECE on the synthetic set" * doctest::may_fail()) {
    std::vector<double> ce, tsl;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const DataSplits s = split(synth_default(seed), SplitSpec{0.8, 0.1, 0.1, seed});
        for (bool enabled : {false, true}) {
            Model m = small_kan(100 + seed, 20, 3);
            TrainConfig c;
            c.batch_size = 32;
            c.lr = 1e-2;
            c.lr_after_decay = 1e-3;
            c.seed = seed;
            c.tsl_enabled = enabled;
            const TrainResult r = train(m, s.train, s.test, c);
            (enabled ? tsl : ce).push_back(r.history.epochs.back().report.ece);
        }
    }
    CAPTURE(kancal::testing::median(ce));
    CAPTURE(kancal::testing::median(tsl));
    CHECK(kancal::testing::median(tsl) <= kancal::testing::median(ce));
}
