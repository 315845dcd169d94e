#include "kancal/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "kancal/losses.hpp"

namespace kancal {

namespace {

double edge(int m, int bins) { return static_cast<double>(m) / static_cast<double>(bins); }

/// Index m of the bin (m/M, (m+1)/M] holding c, with c <= 0 in bin 0.
int equal_width_bin(double c, int bins) {
    int m = static_cast<int>(std::ceil(c * bins)) - 1;
    m = std::clamp(m, 0, bins - 1);
    // ceil() can disagree with the edge comparisons by one ulp.
    while (m > 0 && c <= edge(m, bins)) --m;
    while (m < bins - 1 && c > edge(m + 1, bins)) ++m;
    return m;
}

struct TopLabel {
    std::vector<double> confidence;
    std::vector<char> correct;
};

TopLabel top_label(const EvalSet& eval) {
    TopLabel out;
    const auto n = static_cast<std::size_t>(eval.size());
    out.confidence.resize(n);
    out.correct.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::Index k = 0;
        out.confidence[i] = eval.probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&k);
        out.correct[i] = (static_cast<int>(k) == eval.labels[i]) ? 1 : 0;
    }
    return out;
}

void finish_bin(Bin& bin, double correct_sum, double conf_sum) {
    if (bin.count == 0) return;
    const double c = static_cast<double>(bin.count);
    bin.accuracy = correct_sum / c;
    bin.mean_confidence = conf_sum / c;
}

void require_bins(int bins) {
    if (bins < 1) throw ConfigError("calibration: bin count must be >= 1");
}

double normal_pdf(double z) { return std::exp(-0.5 * z * z); }

/// smECE at a fixed bandwidth from grid-binned mass and residual.
double smece_on_grid(const std::vector<double>& residual, double n, double sigma) {
    const int g = kSmeceGridPoints;
    std::vector<double> smoothed(static_cast<std::size_t>(g), 0.0);
    std::vector<double> kernel(static_cast<std::size_t>(g));
    for (int b = 0; b < g; ++b) {
        const double rb = residual[static_cast<std::size_t>(b)];
        if (rb == 0.0) continue;
        const double ub = (b + 0.5) / g;
        double total = 0.0;
        for (int a = 0; a < g; ++a) {
            const double ua = (a + 0.5) / g;
            // Reflections about 0 and 1 keep all kernel mass inside [0, 1].
            const double k = normal_pdf((ua - ub) / sigma) + normal_pdf((ua + ub) / sigma) +
                             normal_pdf((ua - (2.0 - ub)) / sigma);
            kernel[static_cast<std::size_t>(a)] = k;
            total += k;
        }
        if (total <= 0.0) {
            smoothed[static_cast<std::size_t>(b)] += rb;
            continue;
        }
        const double scale = rb / total;
        for (int a = 0; a < g; ++a)
            smoothed[static_cast<std::size_t>(a)] += scale * kernel[static_cast<std::size_t>(a)];
    }
    double sum = 0.0;
    for (double v : smoothed) sum += std::abs(v);
    return sum / n;
}

}  // namespace

EvalSet EvalSet::from_logits(const Matrix& logits, const Labels& labels, double tau) {
    EvalSet eval;
    eval.probs = softmax(scale_logits(logits, tau));
    eval.labels = labels;
    eval.logits = logits;
    eval.validate();
    return eval;
}

void EvalSet::validate() const {
    if (probs.rows() == 0) throw ConfigError("eval set is empty");
    if (static_cast<Eigen::Index>(labels.size()) != probs.rows())
        throw ConfigError("eval set: label count does not match probability rows");
    if (probs.cols() < 2) throw ConfigError("eval set: need at least 2 classes");
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        if ((probs.row(r).array() < 0.0).any() || !probs.row(r).allFinite())
            throw ConfigError("eval set: probabilities must be finite and nonnegative");
        if (std::abs(probs.row(r).sum() - 1.0) > 1e-9)
            throw ConfigError("eval set: probability row " + std::to_string(r) +
                              " does not sum to 1");
    }
    for (int y : labels)
        if (y < 0 || y >= probs.cols()) throw ConfigError("eval set: label out of range");
}

BinStats bin_stats(const EvalSet& eval, int bins, BinScheme scheme) {
    require_bins(bins);
    if (eval.size() == 0) throw ConfigError("bin_stats: empty eval set");
    const TopLabel top = top_label(eval);
    const std::size_t n = top.confidence.size();

    BinStats stats;
    stats.scheme = scheme;
    stats.total = n;
    stats.bins.resize(static_cast<std::size_t>(bins));
    std::vector<double> correct_sum(stats.bins.size(), 0.0);
    std::vector<double> conf_sum(stats.bins.size(), 0.0);

    if (scheme == BinScheme::equal_width) {
        for (int m = 0; m < bins; ++m) {
            stats.bins[static_cast<std::size_t>(m)].lower_edge = edge(m, bins);
            stats.bins[static_cast<std::size_t>(m)].upper_edge = edge(m + 1, bins);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto m = static_cast<std::size_t>(equal_width_bin(top.confidence[i], bins));
            stats.bins[m].count += 1;
            correct_sum[m] += top.correct[i];
            conf_sum[m] += top.confidence[i];
        }
    } else {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return top.confidence[a] < top.confidence[b];
        });
        for (int m = 0; m < bins; ++m) {
            const std::size_t begin = n * static_cast<std::size_t>(m) / static_cast<std::size_t>(bins);
            const std::size_t end =
                n * static_cast<std::size_t>(m + 1) / static_cast<std::size_t>(bins);
            auto& bin = stats.bins[static_cast<std::size_t>(m)];
            bin.count = end - begin;
            for (std::size_t p = begin; p < end; ++p) {
                correct_sum[static_cast<std::size_t>(m)] += top.correct[order[p]];
                conf_sum[static_cast<std::size_t>(m)] += top.confidence[order[p]];
            }
            if (end > begin) {
                bin.lower_edge = top.confidence[order[begin]];
                bin.upper_edge = top.confidence[order[end - 1]];
            }
        }
    }
    for (std::size_t m = 0; m < stats.bins.size(); ++m)
        finish_bin(stats.bins[m], correct_sum[m], conf_sum[m]);
    return stats;
}

double ece(const BinStats& bins) {
    if (bins.total == 0) return 0.0;
    double sum = 0.0;
    for (const auto& bin : bins.bins)
        if (bin.count > 0)
            sum += static_cast<double>(bin.count) / static_cast<double>(bins.total) * bin.gap();
    return sum;
}

double mce(const BinStats& bins) {
    double worst = 0.0;
    for (const auto& bin : bins.bins)
        if (bin.count > 0) worst = std::max(worst, bin.gap());
    return worst;
}

double ada_ece(const EvalSet& eval, int bins) {
    require_bins(bins);
    if (eval.size() < bins)
        throw ConfigError("ada_ece: need at least as many samples as bins");
    const BinStats stats = bin_stats(eval, bins, BinScheme::adaptive);
    double sum = 0.0;
    for (const auto& bin : stats.bins) sum += bin.gap();
    return sum / static_cast<double>(bins);
}

double classwise_ece(const EvalSet& eval, int bins) {
    require_bins(bins);
    const Eigen::Index n = eval.size();
    const int k_count = eval.class_count();
    if (n == 0) throw ConfigError("classwise_ece: empty eval set");
    if (k_count < 2) throw ConfigError("classwise_ece: need at least 2 classes");

    std::vector<double> count(static_cast<std::size_t>(bins));
    std::vector<double> hits(static_cast<std::size_t>(bins));
    std::vector<double> mass(static_cast<std::size_t>(bins));
    double total = 0.0;
    for (int k = 0; k < k_count; ++k) {
        std::fill(count.begin(), count.end(), 0.0);
        std::fill(hits.begin(), hits.end(), 0.0);
        std::fill(mass.begin(), mass.end(), 0.0);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double pk = eval.probs(i, k);
            const auto m = static_cast<std::size_t>(equal_width_bin(pk, bins));
            count[m] += 1.0;
            hits[m] += eval.labels[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0;
            mass[m] += pk;
        }
        double class_sum = 0.0;
        for (std::size_t m = 0; m < count.size(); ++m) {
            if (count[m] == 0.0) continue;
            class_sum += count[m] / static_cast<double>(n) *
                         std::abs(hits[m] / count[m] - mass[m] / count[m]);
        }
        total += class_sum;
    }
    return total / static_cast<double>(k_count);
}

SmoothEceResult smece(const EvalSet& eval, std::optional<double> bandwidth) {
    const Eigen::Index n_rows = eval.size();
    if (n_rows < 2) throw ConfigError("smece: need at least 2 samples");
    const TopLabel top = top_label(eval);
    const double n = static_cast<double>(n_rows);

    const auto [lo_it, hi_it] = std::minmax_element(top.confidence.begin(), top.confidence.end());
    if (*lo_it == *hi_it) {
        // All confidences identical: the only reliability point is the overall gap.
        double acc = 0.0;
        for (char c : top.correct) acc += c;
        return {std::abs(acc / n - *lo_it), 0.0};
    }

    // Linear binning of residuals onto the grid points (g + 0.5) / G.
    const int g = kSmeceGridPoints;
    std::vector<double> residual(static_cast<std::size_t>(g), 0.0);
    for (std::size_t i = 0; i < top.confidence.size(); ++i) {
        const double f = top.confidence[i];
        const double r = static_cast<double>(top.correct[i]) - f;
        const double t = f * g - 0.5;
        if (t <= 0.0) {
            residual[0] += r;
        } else if (t >= g - 1) {
            residual[static_cast<std::size_t>(g - 1)] += r;
        } else {
            const auto a = static_cast<std::size_t>(std::floor(t));
            const double w = t - static_cast<double>(a);
            residual[a] += (1.0 - w) * r;
            residual[a + 1] += w * r;
        }
    }

    if (bandwidth) {
        if (!(*bandwidth > 0)) throw ConfigError("smece: bandwidth must be positive");
        return {smece_on_grid(residual, n, *bandwidth), *bandwidth};
    }

    // Fixed point smECE_sigma = sigma; smECE_sigma is non-increasing in sigma.
    auto excess = [&](double sigma) { return smece_on_grid(residual, n, sigma) - sigma; };
    double lo = 1.0 / n;
    double hi = 1.0;
    while (excess(lo) < 0.0 && lo > 1e-6) {
        hi = lo;
        lo *= 0.5;
    }
    if (excess(lo) < 0.0) return {smece_on_grid(residual, n, lo), lo};
    for (int it = 0; it < 60 && hi - lo > 1e-9; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (excess(mid) >= 0.0) lo = mid;
        else hi = mid;
    }
    const double sigma = 0.5 * (lo + hi);
    return {smece_on_grid(residual, n, sigma), sigma};
}

double nll(const EvalSet& eval) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < eval.size(); ++i)
        sum -= std::log(std::max(eval.probs(i, eval.labels[static_cast<std::size_t>(i)]), 1e-12));
    return sum / static_cast<double>(eval.size());
}

double brier(const EvalSet& eval) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < eval.size(); ++i) {
        const int y = eval.labels[static_cast<std::size_t>(i)];
        for (Eigen::Index k = 0; k < eval.probs.cols(); ++k) {
            const double d = eval.probs(i, k) - (k == y ? 1.0 : 0.0);
            sum += d * d;
        }
    }
    return sum / static_cast<double>(eval.size());
}

double accuracy(const EvalSet& eval) {
    const TopLabel top = top_label(eval);
    double hits = 0.0;
    for (char c : top.correct) hits += c;
    return hits / static_cast<double>(top.correct.size());
}

CalibrationReport evaluate(const EvalSet& eval, int bins, std::optional<double> smece_bandwidth) {
    eval.validate();
    CalibrationReport report;
    report.bins = bins;
    const BinStats stats = bin_stats(eval, bins, BinScheme::equal_width);
    report.ece = ece(stats);
    report.mce = mce(stats);
    report.ada_ece = ada_ece(eval, static_cast<int>(std::min<Eigen::Index>(bins, eval.size())));
    report.classwise_ece = classwise_ece(eval, bins);
    if (eval.size() >= 2) {
        const auto sm = smece(eval, smece_bandwidth);
        report.smece = sm.value;
        report.smece_bandwidth = sm.bandwidth;
    }
    report.nll = nll(eval);
    report.brier = brier(eval);
    report.accuracy = accuracy(eval);
    return report;
}

double temperature_nll(const Matrix& logits, const Labels& labels, double temperature) {
    const Matrix logp = log_softmax(scale_logits(logits, temperature));
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logp.rows(); ++i) sum -= logp(i, labels[static_cast<std::size_t>(i)]);
    return sum / static_cast<double>(logp.rows());
}

PosthocFit fit_posthoc_temperature(const Matrix& logits, const Labels& labels, double t_min,
                                   double t_max, double tolerance) {
    if (logits.rows() < 2) throw ConfigError("fit_posthoc_temperature: need at least 2 samples");
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
        throw ConfigError("fit_posthoc_temperature: label count mismatch");
    if (!logits.allFinite()) throw ConfigError("fit_posthoc_temperature: non-finite logits");
    if (!(t_min > 0 && t_min < t_max)) throw ConfigError("fit_posthoc_temperature: bad bounds");

    PosthocFit fit;
    fit.nll_before = temperature_nll(logits, labels, 1.0);
    const bool single_class =
        std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels.front(); });
    if (single_class) {
        fit.degenerate = true;
        fit.nll_after = fit.nll_before;
        return fit;
    }

    // NLL(T) is unimodal: it is convex in 1 / T.
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = t_min, b = t_max;
    double c = b - ratio * (b - a);
    double d = a + ratio * (b - a);
    double fc = temperature_nll(logits, labels, c);
    double fd = temperature_nll(logits, labels, d);
    while (b - a > tolerance) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = temperature_nll(logits, labels, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = temperature_nll(logits, labels, d);
        }
    }
    fit.temperature = 0.5 * (a + b);
    fit.nll_after = temperature_nll(logits, labels, fit.temperature);
    if (t_min <= 1.0 && 1.0 <= t_max && fit.nll_before < fit.nll_after) {
        fit.temperature = 1.0;
        fit.nll_after = fit.nll_before;
    }
    return fit;
}

double mean_confidence(const Matrix& logits, const std::vector<Eigen::Index>& rows, double tau) {
    if (rows.empty()) return 0.0;
    double sum = 0.0;
    for (Eigen::Index r : rows) {
        const auto row = logits.row(r);
        const double top = row.maxCoeff();
        // max softmax = 1 / sum_k exp((g_k - g_max) / tau)
        sum += 1.0 / ((row.array() - top) / tau).exp().sum();
    }
    return sum / static_cast<double>(rows.size());
}

PerBinTauResult per_bin_tau_oracle(const Matrix& logits, const Labels& labels, int bins,
                                   double tau_min, double tau_max) {
    require_bins(bins);
    const EvalSet eval = EvalSet::from_logits(logits, labels);
    const TopLabel top = top_label(eval);
    const double n = static_cast<double>(eval.size());

    std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(bins));
    for (std::size_t i = 0; i < top.confidence.size(); ++i)
        members[static_cast<std::size_t>(equal_width_bin(top.confidence[i], bins))].push_back(
            static_cast<Eigen::Index>(i));

    PerBinTauResult result;
    result.taus.assign(static_cast<std::size_t>(bins), 1.0);
    for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& rows = members[m];
        if (rows.empty()) continue;
        double acc = 0.0;
        for (Eigen::Index r : rows) acc += top.correct[static_cast<std::size_t>(r)];
        acc /= static_cast<double>(rows.size());
        const double weight = static_cast<double>(rows.size()) / n;

        // conf(tau) - acc is decreasing in tau.
        auto excess = [&](double tau) { return mean_confidence(logits, rows, tau) - acc; };
        const double before = excess(1.0);
        double tau = 1.0;
        if (before != 0.0) {
            double lo = before > 0 ? 1.0 : tau_min;
            double hi = before > 0 ? tau_max : 1.0;
            if (before > 0 && excess(hi) >= 0.0) {
                tau = hi;
            } else if (before < 0 && excess(lo) <= 0.0) {
                tau = lo;
            } else {
                for (int it = 0; it < 100 && hi - lo > 1e-12; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    if (excess(mid) > 0.0) lo = mid;
                    else hi = mid;
                }
                tau = std::abs(excess(lo)) <= std::abs(excess(hi)) ? lo : hi;
            }
        }
        double after = std::abs(excess(tau));
        if (after > std::abs(before)) {
            tau = 1.0;
            after = std::abs(before);
        }
        result.taus[m] = tau;
        result.ece_before += weight * std::abs(before);
        result.ece_after += weight * after;
    }
    return result;
}

TauCurve tau_sweep(const Matrix& logits, const Labels& labels, const std::vector<double>& tau_grid,
                   int bins) {
    if (tau_grid.empty()) throw ConfigError("tau_sweep: empty grid");
    for (std::size_t i = 0; i < tau_grid.size(); ++i) {
        if (!(tau_grid[i] > 0)) throw ConfigError("tau_sweep: temperatures must be positive");
        if (i > 0 && !(tau_grid[i] > tau_grid[i - 1]))
            throw ConfigError("tau_sweep: grid must be ascending");
    }
    TauCurve curve;
    curve.taus = tau_grid;
    for (double tau : tau_grid) {
        const EvalSet eval = EvalSet::from_logits(logits, labels, tau);
        curve.eces.push_back(ece(bin_stats(eval, bins)));
    }
    curve.argmin = static_cast<std::size_t>(
        std::min_element(curve.eces.begin(), curve.eces.end()) - curve.eces.begin());
    return curve;
}

std::vector<double> linspace(double lo, double hi, int count) {
    if (count < 1) throw ConfigError("linspace: count must be >= 1");
    std::vector<double> out(static_cast<std::size_t>(count));
    if (count == 1) {
        out[0] = lo;
        return out;
    }
    for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
    out.back() = hi;
    return out;
}

std::string reliability_csv(const BinStats& bins) {
    std::ostringstream os;
    os << "bin_lower,bin_upper,count,accuracy,confidence,gap\n";
    char line[256];
    for (const auto& bin : bins.bins) {
        std::snprintf(line, sizeof line, "%.10g,%.10g,%zu,%.10g,%.10g,%.10g\n", bin.lower_edge,
                      bin.upper_edge, bin.count, bin.accuracy, bin.mean_confidence, bin.gap());
        os << line;
    }
    return os.str();
}

}  // namespace kancal
