#pragma once

// Adam, temperature projection, and the joint (parameters, tau) training loop.

#include <functional>
#include <optional>
#include <vector>

#include "kancal/calibration.hpp"
#include "kancal/data.hpp"
#include "kancal/losses.hpp"
#include "kancal/network.hpp"

namespace kancal {

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
};

/// One bias-corrected Adam update applied in place. Moment buffers are
/// created on the first call.
void adam_step(AdamState& state, const std::vector<Matrix*>& params, const GradientSet& grads,
               double lr);

inline double project_tau(double tau, double tau_min, double tau_max) {
    if (!(tau >= tau_min)) return tau_min;  // also maps NaN to tau_min
    return tau > tau_max ? tau_max : tau;
}

struct TrainConfig {
    int epochs = 20;
    int batch_size = 128;
    double lr = 1e-3;
    double lr_after_decay = 1e-4;
    int decay_epoch = 10;  // epochs after this one use lr_after_decay
    std::optional<double> lr_tau;  // defaults to lr
    double tau0 = 1.0;
    double tau_min = 0.05;
    double tau_max = 10.0;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::ce();
    bool tsl_enabled = false;
    int eval_bins = kDefaultBins;
    std::optional<double> eval_smece_bandwidth;  // fixed-point search when unset

    double tau_learning_rate() const { return lr_tau.value_or(lr); }
    double learning_rate(int epoch) const { return epoch > decay_epoch ? lr_after_decay : lr; }
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    double tau = 1.0;
    double lr = 0.0;
    CalibrationReport report;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
};

struct StepInfo {
    int epoch = 0;
    long step = 0;
    double loss = 0.0;
    double tau = 1.0;
    double grad_tau = 0.0;
};

struct TrainResult {
    double tau = 1.0;
    TrainHistory history;
};

using StepObserver = std::function<void(const StepInfo&)>;
using EpochObserver = std::function<void(const EpochRecord&)>;

/// Minibatch Adam on the model parameters and plain projected gradient
/// descent on tau. With tsl_enabled = false, tau is held at 1. Each epoch is
/// evaluated on `eval` with probabilities softmax(logits / tau).
TrainResult train(Model& model, const Dataset& data, const Dataset& eval,
                  const TrainConfig& config, const StepObserver& on_step = {},
                  const EpochObserver& on_epoch = {});

}  // namespace kancal
