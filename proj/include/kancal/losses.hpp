#pragma once

// Softmax, the base classification losses, and the temperature-scaled
// wrapper that differentiates through logits / tau.

#include <cmath>
#include <string>

#include "kancal/core.hpp"

namespace kancal {

/// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    MatrixX<Scalar> out = logits;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
    return out;
}

/// Row-wise log-softmax.
template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    MatrixX<Scalar> out = logits;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        row.array() -= row.maxCoeff();
        row.array() -= std::log(row.array().exp().sum());
    }
    return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> scale_logits(const Eigen::MatrixBase<Derived>& logits,
                                               typename Derived::Scalar tau) {
    if (!(tau > 0)) throw ConfigError("scale_logits: tau must be positive");
    return logits / tau;
}

/// Index of the first maximal entry of each row.
template <typename Derived>
Labels argmax_rows(const Eigen::MatrixBase<Derived>& m) {
    Labels out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Eigen::Index idx = 0;
        m.row(r).maxCoeff(&idx);
        out[static_cast<std::size_t>(r)] = static_cast<int>(idx);
    }
    return out;
}

struct LossKind {
    enum class Type { ce, brier, focal, label_smooth, dual_focal, focal_calibration };

    Type type = Type::ce;
    double gamma = 0.0;   // focal exponent (focal, dual_focal, focal_calibration)
    double alpha = 0.0;   // label smoothing mass
    double lambda = 0.0;  // weight of the squared-error term in focal_calibration

    static LossKind ce() { return {Type::ce}; }
    static LossKind brier() { return {Type::brier}; }
    static LossKind focal(double gamma = 3.0) { return {Type::focal, gamma}; }
    static LossKind label_smooth(double alpha = 0.05) { return {Type::label_smooth, 0.0, alpha}; }
    static LossKind dual_focal(double gamma = 2.0) { return {Type::dual_focal, gamma}; }
    static LossKind focal_calibration(double gamma = 3.0, double lambda = 1.0) {
        return {Type::focal_calibration, gamma, 0.0, lambda};
    }

    void validate() const;
    std::string name() const;
    /// Accepts ce, brier, focal, label_smooth, dual_focal, focal_calibration
    /// with default hyperparameters.
    static LossKind parse(const std::string& name);
};

struct TemperatureState {
    double tau = 1.0;
    double tau_min = 0.05;
    double tau_max = 10.0;
    double lr_tau = 1e-3;

    void validate() const;
};

struct LossValue {
    double value = 0.0;
    Matrix grad_logits;
};

struct LossOutput {
    double value = 0.0;
    Matrix grad_logits;
    double grad_tau = 0.0;
};

/// Batch-mean loss of softmax(logits) against labels, with the gradient
/// w.r.t. the logits.
LossValue base_loss(const LossKind& kind, const Matrix& logits, const Labels& labels);

/// Base loss evaluated on softmax(logits / tau); gradients w.r.t. the
/// unscaled logits and tau.
LossOutput tsl(const LossKind& kind, const Matrix& logits, const Labels& labels,
               const TemperatureState& temp);

}  // namespace kancal
