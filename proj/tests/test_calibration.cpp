#include <doctest.h>

#include <sstream>

#include "kancal/calibration.hpp"
#include "kancal/losses.hpp"
#include "test_support.hpp"

using namespace kancal;

namespace {

struct Oracle {
    std::vector<double> conf;
    std::vector<int> correct;
};

Oracle top_label_oracle(const EvalSet& e) {
    Oracle o;
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        int arg = 0;
        for (Eigen::Index k = 1; k < e.probs.cols(); ++k)
            if (e.probs(i, k) > e.probs(i, arg)) arg = static_cast<int>(k);
        o.conf.push_back(e.probs(i, arg));
        o.correct.push_back(arg == e.labels[static_cast<std::size_t>(i)] ? 1 : 0);
    }
    return o;
}

bool in_bin(double c, int m, int bins) {
    if (m == 0 && c == 0.0) return true;
    return c > static_cast<double>(m) / bins && c <= static_cast<double>(m + 1) / bins;
}

/// Direct summation over bins and samples.
double ece_oracle(const std::vector<double>& conf, const std::vector<int>& correct, int bins, bool max_gap = false) {
    double total = 0, worst = 0;
    for (int m = 0; m < bins; ++m) {
        double count = 0, acc = 0, c = 0;
        for (std::size_t i = 0; i < conf.size(); ++i)
            if (in_bin(conf[i], m, bins)) {
                ++count;
                acc += correct[i];
                c += conf[i];
            }
        if (count == 0) continue;
        const double gap = std::abs(acc / count - c / count);
        total += count / static_cast<double>(conf.size()) * gap;
        worst = std::max(worst, gap);
    }
    return max_gap ? worst : total;
}

double ada_oracle(const Oracle& o, int bins) {
    const std::size_t n = o.conf.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return o.conf[a] < o.conf[b]; });
    double total = 0;
    for (int m = 0; m < bins; ++m) {
        const std::size_t lo = static_cast<std::size_t>(m) * n / static_cast<std::size_t>(bins);
        const std::size_t hi = static_cast<std::size_t>(m + 1) * n / static_cast<std::size_t>(bins);
        double acc = 0, c = 0;
        for (std::size_t j = lo; j < hi; ++j) {
            acc += o.correct[idx[j]];
            c += o.conf[idx[j]];
        }
        const double cnt = static_cast<double>(hi - lo);
        total += std::abs(acc / cnt - c / cnt);
    }
    return total / bins;
}

double classwise_oracle(const EvalSet& e, int bins) {
    double total = 0;
    for (Eigen::Index k = 0; k < e.probs.cols(); ++k) {
        std::vector<double> p;
        std::vector<int> hit;
        for (Eigen::Index i = 0; i < e.size(); ++i) {
            p.push_back(e.probs(i, k));
            hit.push_back(e.labels[static_cast<std::size_t>(i)] == k ? 1 : 0);
        }
        total += ece_oracle(p, hit, bins);
    }
    return total / static_cast<double>(e.probs.cols());
}

Matrix random_logits(Eigen::Index n, Eigen::Index k, Rng& rng, double scale) {
    Matrix m(n, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

/// Labels drawn from softmax(logits): calibrated by construction.
Labels sample_labels(const Matrix& logits, Rng& rng) {
    const Matrix p = softmax(logits);
    Labels y(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        double u = rng.uniform(), acc = 0;
        int k = 0;
        for (; k < p.cols() - 1; ++k) {
            acc += p(i, k);
            if (u < acc) break;
        }
        y[static_cast<std::size_t>(i)] = k;
    }
    return y;
}

Labels random_labels(Eigen::Index n, int k, Rng& rng) {
    Labels y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    return y;
}

EvalSet random_eval(Rng& rng) {
    const Eigen::Index n = 20 + static_cast<Eigen::Index>(rng.below(981));
    const int k = 2 + static_cast<int>(rng.below(9));
    const Matrix logits = random_logits(n, k, rng, rng.uniform(0.2, 5.0));
    const Labels y = rng.uniform() < 0.5 ? sample_labels(logits, rng) : random_labels(n, k, rng);
    return EvalSet::from_logits(logits, y);
}

EvalSet eval_of(std::initializer_list<std::initializer_list<double>> rows, Labels labels) {
    Matrix p(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : rows) {
        Eigen::Index c = 0;
        for (double v : row) p(r, c++) = v;
        ++r;
    }
    return EvalSet{p, std::move(labels), std::nullopt};
}

}  // namespace

TEST_CASE("bin statistics") {
    SUBCASE("all confident and correct fills the top bin") {
        const EvalSet e = eval_of({{1, 0}, {0, 1}, {1, 0}}, {0, 1, 0});
        const BinStats b = bin_stats(e, 15);
        CHECK(b.bins.back().count == 3);
        CHECK(b.bins.back().accuracy == 1.0);
        CHECK(b.bins.back().mean_confidence == 1.0);
        for (int m = 0; m < 14; ++m) CHECK(b.bins[static_cast<std::size_t>(m)].count == 0);
        CHECK(ece(b) == 0.0);
    }
    SUBCASE("one bin holds everything") {
        Rng rng(1);
        const EvalSet e = random_eval(rng);
        const Oracle o = top_label_oracle(e);
        const BinStats b = bin_stats(e, 1);
        CHECK(b.bins[0].count == static_cast<std::size_t>(e.size()));
        CHECK(b.bins[0].accuracy == doctest::Approx(accuracy(e)).epsilon(1e-14));
        CHECK(b.bins[0].mean_confidence ==
              doctest::Approx(std::accumulate(o.conf.begin(), o.conf.end(), 0.0) / static_cast<double>(e.size())).epsilon(1e-14));
    }
    SUBCASE("adaptive bins of 100 points hold 10 each") {
        Rng rng(2);
        const EvalSet e = EvalSet::from_logits(random_logits(100, 4, rng, 2.0), random_labels(100, 4, rng));
        for (const Bin& b : bin_stats(e, 10, BinScheme::adaptive).bins) CHECK(b.count == 10);
    }
    SUBCASE("bins are half-open on the left") {
        // 0.6 sits exactly on the edge between bins 2 and 3 of 5: it belongs to bin 2.
        const EvalSet e = eval_of({{0.6, 0.4}, {0.4, 0.6}}, {0, 0});
        const BinStats b = bin_stats(e, 5);
        CHECK(b.bins[2].count == 2);
    }
    SUBCASE("empty set is an error") {
        CHECK_THROWS(bin_stats(EvalSet{Matrix(0, 2), {}, std::nullopt}, 15));
    }
}

TEST_CASE("ece and mce worked values") {
    // Two bins of weight 1/2 with gaps 0.10 and 0.05.
    BinStats b;
    b.total = 4;
    b.bins = {Bin{2, 0.5, 0.6, 0.5, 0.75}, Bin{2, 0.9, 0.85, 0.75, 1.0}};
    CHECK(ece(b) == doctest::Approx(0.075).epsilon(1e-14));
    CHECK(mce(b) == doctest::Approx(0.1).epsilon(1e-14));
}

TEST_CASE("metrics equal brute-force oracles") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const EvalSet e = random_eval(rng);
        const Oracle o = top_label_oracle(e);
        const int bins = trial % 3 == 0 ? 15 : 1 + static_cast<int>(rng.below(20));
        CAPTURE(trial);
        CHECK(std::abs(ece(bin_stats(e, bins)) - ece_oracle(o.conf, o.correct, bins)) < 1e-12);
        CHECK(std::abs(mce(bin_stats(e, bins)) - ece_oracle(o.conf, o.correct, bins, true)) < 1e-12);
        CHECK(std::abs(ada_ece(e, bins) - ada_oracle(o, bins)) < 1e-12);
        CHECK(std::abs(classwise_ece(e, bins) - classwise_oracle(e, bins)) < 1e-12);
        double nll_ref = 0, brier_ref = 0;
        for (Eigen::Index i = 0; i < e.size(); ++i) {
            const int y = e.labels[static_cast<std::size_t>(i)];
            nll_ref -= std::log(std::max(e.probs(i, y), 1e-12));
            for (Eigen::Index k = 0; k < e.probs.cols(); ++k) brier_ref += std::pow(e.probs(i, k) - (k == y), 2);
        }
        CHECK(std::abs(nll(e) - nll_ref / static_cast<double>(e.size())) < 1e-12);
        CHECK(std::abs(brier(e) - brier_ref / static_cast<double>(e.size())) < 1e-12);
        CHECK(ece(bin_stats(e, bins)) <= mce(bin_stats(e, bins)) + 1e-15);
    }
}

TEST_CASE("metric edge cases") {
    SUBCASE("adaptive ECE of a perfectly calibrated predictor is zero") {
        // Each adaptive bin of 4 has confidence 0.75 and 3 of 4 correct.
        Matrix p(8, 2);
        Labels y;
        for (int i = 0; i < 8; ++i) {
            p.row(i) << 0.75, 0.25;
            y.push_back(i % 4 == 3 ? 1 : 0);
        }
        CHECK(std::abs(ada_ece(EvalSet{p, y, std::nullopt}, 2)) < 1e-12);
    }
    SUBCASE("adaptive ECE with one bin is the overall gap") {
        Rng rng(4);
        const EvalSet e = random_eval(rng);
        const Oracle o = top_label_oracle(e);
        const double conf = std::accumulate(o.conf.begin(), o.conf.end(), 0.0) / static_cast<double>(e.size());
        CHECK(ada_ece(e, 1) == doctest::Approx(std::abs(accuracy(e) - conf)).epsilon(1e-12));
    }
    SUBCASE("adaptive ECE needs at least as many points as bins") {
        CHECK_THROWS_AS(ada_ece(eval_of({{0.6, 0.4}}, {0}), 2), ConfigError);
    }
    SUBCASE("class-wise ECE of one-hot perfect predictions is zero") {
        CHECK(classwise_ece(eval_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {0, 1, 2}), 15) == 0.0);
    }
    SUBCASE("class-wise ECE for two classes is the mean of mirrored terms") {
        Rng rng(5);
        const EvalSet e = EvalSet::from_logits(random_logits(300, 2, rng, 2.0), random_labels(300, 2, rng));
        std::vector<double> p0, p1;
        std::vector<int> y0, y1;
        for (Eigen::Index i = 0; i < e.size(); ++i) {
            p0.push_back(e.probs(i, 0));
            p1.push_back(e.probs(i, 1));
            y0.push_back(e.labels[static_cast<std::size_t>(i)] == 0);
            y1.push_back(e.labels[static_cast<std::size_t>(i)] == 1);
        }
        CHECK(std::abs(classwise_ece(e, 15) - 0.5 * (ece_oracle(p0, y0, 15) + ece_oracle(p1, y1, 15))) < 1e-12);
    }
    SUBCASE("uniform K = 10 gives NLL ln 10") {
        Matrix p = Matrix::Constant(5, 10, 0.1);
        CHECK(nll(EvalSet{p, {0, 1, 2, 3, 4}, std::nullopt}) == doctest::Approx(std::log(10.0)).epsilon(1e-14));
    }
    SUBCASE("perfect one-hot has zero NLL and Brier") {
        const EvalSet e = eval_of({{1, 0}, {0, 1}}, {0, 1});
        CHECK(nll(e) == 0.0);
        CHECK(brier(e) == 0.0);
    }
    SUBCASE("rows off the simplex are rejected") {
        CHECK_THROWS(eval_of({{0.7, 0.4}}, {0}).validate());
    }
}

TEST_CASE("smooth ECE") {
    SUBCASE("calibrated by construction is small") {
        Rng rng(6);
        const Matrix logits = random_logits(10000, 3, rng, 1.5);
        const EvalSet e = EvalSet::from_logits(logits, sample_labels(logits, rng));
        const SmoothEceResult r = smece(e);
        CHECK(r.value < 0.02);
    }
    SUBCASE("confident and correct gives zero") {
        Matrix p = Matrix::Zero(50, 3);
        Labels y;
        for (int i = 0; i < 50; ++i) {
            p(i, i % 3) = 1.0;
            y.push_back(i % 3);
        }
        CHECK(std::abs(smece(EvalSet{p, y, std::nullopt}).value) < 1e-9);
    }
    SUBCASE("bounded, and the fixed point is consistent") {
        Rng rng(7);
        for (int trial = 0; trial < 100; ++trial) {
            const EvalSet e = random_eval(rng);
            const SmoothEceResult r = smece(e);
            CHECK(r.value >= 0.0);
            CHECK(r.value <= 1.0);
            if (r.bandwidth > 0) {
                CHECK(std::abs(smece(e, r.bandwidth).value - r.bandwidth) < 2.0 / 512);
                CHECK(std::abs(r.value - r.bandwidth) < 2.0 / 512);
            }
        }
    }
    SUBCASE("identical confidences give the binned gap") {
        const EvalSet e = eval_of({{0.7, 0.3}, {0.7, 0.3}, {0.7, 0.3}, {0.7, 0.3}}, {0, 1, 1, 0});
        CHECK(smece(e).value == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("a fixed bandwidth is reported back") {
        Rng rng(8);
        const EvalSet e = random_eval(rng);
        CHECK(smece(e, 0.05).bandwidth == 0.05);
    }
}

TEST_CASE("post-hoc temperature") {
    Rng rng(9);
    const Matrix base = random_logits(5000, 4, rng, 1.5);
    const Labels y = sample_labels(base, rng);
    for (double c : {0.5, 2.0, 4.0}) {
        const Matrix scaled = base * c;
        const PosthocFit fit = fit_posthoc_temperature(scaled, y);
        // Grid-search oracle at 1e-3 resolution.
        double best_t = 1, best = std::numeric_limits<double>::infinity();
        for (double t = 0.05; t <= 10.0; t += 1e-3) {
            const double v = temperature_nll(scaled, y, t);
            if (v < best) best = v, best_t = t;
        }
        CAPTURE(c);
        CHECK(std::abs(fit.temperature - best_t) < 2e-3);
        CHECK(std::abs(fit.temperature - c) < 0.05 * c);
        CHECK(fit.nll_after <= fit.nll_before);
        // Refitting the rescaled logits returns about 1.
        CHECK(std::abs(fit_posthoc_temperature(scaled / fit.temperature, y).temperature - 1.0) < 0.02);
    }
    SUBCASE("never worse than T = 1") {
        for (int trial = 0; trial < 50; ++trial) {
            const Matrix g = random_logits(200, 3, rng, rng.uniform(0.1, 6));
            const Labels yy = random_labels(200, 3, rng);
            const PosthocFit fit = fit_posthoc_temperature(g, yy);
            CHECK(fit.nll_after <= fit.nll_before);
            CHECK(fit.temperature >= 0.05);
            CHECK(fit.temperature <= 10.0);
        }
    }
    SUBCASE("single-class labels are degenerate") {
        const Matrix g = random_logits(30, 3, rng, 1.0);
        const PosthocFit fit = fit_posthoc_temperature(g, Labels(30, 1));
        CHECK(fit.degenerate);
        CHECK(fit.temperature == 1.0);
    }
    SUBCASE("accuracy is unchanged by any temperature") {
        const Matrix g = random_logits(300, 5, rng, 2.0);
        const Labels yy = random_labels(300, 5, rng);
        const double a = accuracy(EvalSet::from_logits(g, yy));
        for (double t : {0.1, 0.7, 3.0, 9.0}) CHECK(accuracy(EvalSet::from_logits(g, yy, t)) == a);
    }
}

TEST_CASE("mean confidence decreases with temperature") {
    Rng rng(10);
    const Matrix g = random_logits(50, 4, rng, 3.0);
    std::vector<Eigen::Index> rows(50);
    std::iota(rows.begin(), rows.end(), 0);
    double prev = 1.0 + 1e-12;
    for (double tau = 0.01; tau < 1000; tau *= 1.5) {
        const double c = mean_confidence(g, rows, tau);
        CHECK(c < prev);
        prev = c;
    }
    CHECK(mean_confidence(g, rows, 1e-4) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(mean_confidence(g, rows, 1e6) == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("per-bin tau oracle") {
    Rng rng(11);
    SUBCASE("never increases ECE; strictly decreases when miscalibrated") {
        for (int trial = 0; trial < 100; ++trial) {
            const Eigen::Index n = 100 + static_cast<Eigen::Index>(rng.below(900));
            const int k = 2 + static_cast<int>(rng.below(8));
            const Matrix g = random_logits(n, k, rng, rng.uniform(0.3, 6.0));
            const Labels y = rng.uniform() < 0.5 ? sample_labels(g, rng) : random_labels(n, k, rng);
            const PerBinTauResult r = per_bin_tau_oracle(g, y);
            CHECK(r.ece_before == doctest::Approx(ece(bin_stats(EvalSet::from_logits(g, y), 15))).epsilon(1e-12));
            CHECK(r.ece_after <= r.ece_before);
            if (r.ece_before > 1e-3) CHECK(r.ece_after < r.ece_before);
        }
    }
    SUBCASE("beats an exhaustive tau grid in every bin") {
        const Matrix g = random_logits(500, 3, rng, 2.5);
        const Labels y = random_labels(500, 3, rng);
        const PerBinTauResult r = per_bin_tau_oracle(g, y, 10);
        const EvalSet e = EvalSet::from_logits(g, y);
        const Oracle o = top_label_oracle(e);
        double grid_after = 0;
        for (int m = 0; m < 10; ++m) {
            std::vector<Eigen::Index> rows;
            double acc = 0;
            for (std::size_t i = 0; i < o.conf.size(); ++i)
                if (in_bin(o.conf[i], m, 10)) {
                    rows.push_back(static_cast<Eigen::Index>(i));
                    acc += o.correct[i];
                }
            if (rows.empty()) continue;
            acc /= static_cast<double>(rows.size());
            double best = std::abs(mean_confidence(g, rows, 1.0) - acc);
            for (double tau = 0.05; tau <= 10.0; tau += 0.01)
                best = std::min(best, std::abs(mean_confidence(g, rows, tau) - acc));
            grid_after += static_cast<double>(rows.size()) / 500.0 * best;
        }
        CHECK(r.ece_after <= grid_after + 1e-9);
    }
    SUBCASE("overconfident bins get tau above 1") {
        // Twenty rows at confidence 0.9 of which 14 are correct.
        Matrix g(20, 2);
        Labels y;
        for (int i = 0; i < 20; ++i) {
            g.row(i) << std::log(9.0), 0.0;
            y.push_back(i < 14 ? 0 : 1);
        }
        const PerBinTauResult r = per_bin_tau_oracle(g, y, 10);
        CHECK(r.taus[8] > 1.0);
        CHECK(r.ece_before == doctest::Approx(0.2).epsilon(1e-9));
        CHECK(r.ece_after < 1e-9);
    }
    SUBCASE("already exact bins are left alone") {
        // Confidence 0.75 with 3 of 4 correct.
        Matrix g(4, 2);
        for (int i = 0; i < 4; ++i) g.row(i) << std::log(3.0), 0.0;
        const PerBinTauResult r = per_bin_tau_oracle(g, {0, 0, 0, 1}, 10);
        CHECK(r.ece_before < 1e-12);
        CHECK(r.ece_after == r.ece_before);
    }
}

TEST_CASE("tau sweep") {
    Rng rng(12);
    const Matrix g = random_logits(4000, 3, rng, 1.5);
    const Labels y = sample_labels(g, rng);
    const std::vector<double> grid = linspace(0.25, 5.0, 96);
    const TauCurve calibrated = tau_sweep(g, y, grid);
    CHECK(std::abs(calibrated.best_tau() - 1.0) < 0.25);
    const TauCurve doubled = tau_sweep(g * 2.0, y, grid);
    CHECK(std::abs(doubled.best_tau() - 2.0) < 0.5);
    for (const TauCurve* c : {&calibrated, &doubled}) {
        CHECK(c->eces[c->argmin] <= c->eces.front());
        CHECK(c->eces[c->argmin] <= c->eces.back());
        for (std::size_t i = 0; i < grid.size(); ++i)
            CHECK(c->eces[i] == doctest::Approx(ece(bin_stats(EvalSet::from_logits(c == &calibrated ? g : Matrix(g * 2.0), y, grid[i]), 15))).epsilon(1e-12));
    }
    CHECK_THROWS_AS(tau_sweep(g, y, {1.0, 0.5}), ConfigError);
    CHECK_THROWS_AS(tau_sweep(g, y, {0.0, 1.0}), ConfigError);
}

TEST_CASE("evaluate and reliability CSV") {
    Rng rng(13);
    const EvalSet e = random_eval(rng);
    const CalibrationReport r = evaluate(e);
    CHECK(r.bins == 15);
    CHECK(r.ece == ece(bin_stats(e, 15)));
    CHECK(r.accuracy == accuracy(e));
    for (double v : {r.ece, r.ada_ece, r.classwise_ece, r.mce, r.smece, r.brier, r.accuracy}) {
        CHECK(v >= 0.0);
        CHECK(std::isfinite(v));
    }

    const std::string csv = reliability_csv(bin_stats(e, 15));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "bin_lower,bin_upper,count,accuracy,confidence,gap");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 15);

    CHECK(linspace(0.5, 5.0, 10).front() == 0.5);
    CHECK(linspace(0.5, 5.0, 10).back() == 5.0);
}
