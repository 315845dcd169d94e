#pragma once

// Calibration metrics over top-label confidences and class probabilities,
// reliability-diagram binning, post-hoc temperature fitting and temperature
// sweeps.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kancal/core.hpp"

namespace kancal {

inline constexpr int kDefaultBins = 15;
inline constexpr int kSmeceGridPoints = 512;

/// Predicted probabilities (rows on the simplex) with true labels.
struct EvalSet {
    Matrix probs;
    Labels labels;
    std::optional<Matrix> logits;

    static EvalSet from_logits(const Matrix& logits, const Labels& labels, double tau = 1.0);

    Eigen::Index size() const { return probs.rows(); }
    int class_count() const { return static_cast<int>(probs.cols()); }
    void validate() const;
};

enum class BinScheme { equal_width, adaptive };

struct Bin {
    std::size_t count = 0;
    double accuracy = 0.0;
    double mean_confidence = 0.0;
    double lower_edge = 0.0;
    double upper_edge = 0.0;

    double gap() const { return std::abs(accuracy - mean_confidence); }
};

struct BinStats {
    BinScheme scheme = BinScheme::equal_width;
    std::vector<Bin> bins;
    std::size_t total = 0;

    int bin_count() const { return static_cast<int>(bins.size()); }
};

/// Top-label reliability bins. Equal-width bins are the half-open intervals
/// (m/M, (m+1)/M] (confidence 0 falls into the first bin); adaptive bins
/// split the sorted confidences into M groups whose sizes differ by at most 1.
BinStats bin_stats(const EvalSet& eval, int bins, BinScheme scheme = BinScheme::equal_width);

/// Weighted mean bin gap.
double ece(const BinStats& bins);
/// Largest gap over occupied bins.
double mce(const BinStats& bins);
/// Unweighted mean gap over M adaptive (equal-mass) bins. Requires N >= M.
double ada_ece(const EvalSet& eval, int bins = kDefaultBins);
/// Per-class binned gap of p_k against 1{y = k}, weighted by bin mass and
/// averaged over classes.
double classwise_ece(const EvalSet& eval, int bins = kDefaultBins);

struct SmoothEceResult {
    double value = 0.0;
    double bandwidth = 0.0;
};

/// Kernel-smoothed calibration error.
///
/// Residuals (correct - confidence) are spread over a 512-point grid on
/// [0, 1] with a reflected Gaussian kernel of width `bandwidth`; the result
/// is the integral of the absolute smoothed residual. Without a bandwidth,
/// sigma is chosen as the fixed point smECE_sigma = sigma by bisection.
SmoothEceResult smece(const EvalSet& eval, std::optional<double> bandwidth = std::nullopt);

double nll(const EvalSet& eval);
double brier(const EvalSet& eval);
double accuracy(const EvalSet& eval);

struct CalibrationReport {
    double ece = 0.0;
    double ada_ece = 0.0;
    double classwise_ece = 0.0;
    double mce = 0.0;
    double smece = 0.0;
    double nll = 0.0;
    double brier = 0.0;
    double accuracy = 0.0;
    int bins = kDefaultBins;
    double smece_bandwidth = 0.0;
};

/// All metrics for one evaluation. Adaptive ECE falls back to min(M, N) bins.
CalibrationReport evaluate(const EvalSet& eval, int bins = kDefaultBins,
                           std::optional<double> smece_bandwidth = std::nullopt);

struct PosthocFit {
    double temperature = 1.0;
    double nll_before = 0.0;  // at T = 1
    double nll_after = 0.0;   // at T = temperature
    bool degenerate = false;  // single-class labels; temperature left at 1
};

/// Mean NLL of softmax(logits / T).
double temperature_nll(const Matrix& logits, const Labels& labels, double temperature);

/// Minimises validation NLL over T in [t_min, t_max] by golden-section search.
PosthocFit fit_posthoc_temperature(const Matrix& logits, const Labels& labels, double t_min = 0.05,
                                   double t_max = 10.0, double tolerance = 1e-4);

struct PerBinTauResult {
    std::vector<double> taus;  // one per equal-width bin; 1 for empty or already exact bins
    double ece_before = 0.0;
    double ece_after = 0.0;
};

/// Mean top-label confidence of the given rows at temperature tau.
double mean_confidence(const Matrix& logits, const std::vector<Eigen::Index>& rows, double tau);

/// Per-bin temperatures tau_m minimising |acc_m - conf_m(tau)| for the bins
/// of the unscaled model; reports the binned ECE before and after.
PerBinTauResult per_bin_tau_oracle(const Matrix& logits, const Labels& labels,
                                   int bins = kDefaultBins, double tau_min = 0.05,
                                   double tau_max = 10.0);

struct TauCurve {
    std::vector<double> taus;
    std::vector<double> eces;
    std::size_t argmin = 0;

    double best_tau() const { return taus.at(argmin); }
};

TauCurve tau_sweep(const Matrix& logits, const Labels& labels, const std::vector<double>& tau_grid,
                   int bins = kDefaultBins);

/// Evenly spaced grid of `count` points from lo to hi inclusive.
std::vector<double> linspace(double lo, double hi, int count);

/// Reliability CSV: bin_lower,bin_upper,count,accuracy,confidence,gap.
std::string reliability_csv(const BinStats& bins);

}  // namespace kancal
