#include "kancal/losses.hpp"

#include <cmath>

namespace kancal {

namespace {

void check_labels(const Matrix& logits, const Labels& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
        throw ConfigError("loss: label count does not match batch size");
    if (logits.rows() == 0) throw ConfigError("loss: empty batch");
    for (int y : labels)
        if (y < 0 || y >= logits.cols())
            throw ConfigError("loss: label " + std::to_string(y) + " out of range [0, " +
                              std::to_string(logits.cols()) + ")");
}

/// gamma * w^(gamma - 1) with the w = 0 limit taken as 0.
double focal_slope(double w, double gamma) {
    if (gamma == 0.0 || w == 0.0) return 0.0;
    return gamma * std::pow(w, gamma - 1.0);
}

}  // namespace

void LossKind::validate() const {
    if (gamma < 0) throw ConfigError("loss: gamma must be >= 0");
    if (alpha < 0 || alpha >= 1) throw ConfigError("loss: alpha must be in [0, 1)");
    if (lambda < 0) throw ConfigError("loss: lambda must be >= 0");
}

std::string LossKind::name() const {
    switch (type) {
        case Type::ce: return "ce";
        case Type::brier: return "brier";
        case Type::focal: return "focal";
        case Type::label_smooth: return "label_smooth";
        case Type::dual_focal: return "dual_focal";
        case Type::focal_calibration: return "focal_calibration";
    }
    return "?";
}

LossKind LossKind::parse(const std::string& name) {
    if (name == "ce") return ce();
    if (name == "brier" || name == "bs") return brier();
    if (name == "focal" || name == "fl") return focal();
    if (name == "label_smooth" || name == "ls") return label_smooth();
    if (name == "dual_focal" || name == "dfl") return dual_focal();
    if (name == "focal_calibration" || name == "fcl") return focal_calibration();
    throw ConfigError("unknown loss '" + name + "'");
}

void TemperatureState::validate() const {
    if (!(tau_min > 0)) throw ConfigError("temperature: tau_min must be positive");
    if (!(tau_min <= tau_max)) throw ConfigError("temperature: tau_min must be <= tau_max");
    if (!(tau >= tau_min && tau <= tau_max))
        throw ConfigError("temperature: tau=" + std::to_string(tau) + " outside [" +
                          std::to_string(tau_min) + ", " + std::to_string(tau_max) + "]");
}

LossValue base_loss(const LossKind& kind, const Matrix& logits, const Labels& labels) {
    kind.validate();
    check_labels(logits, labels);
    const Eigen::Index n = logits.rows();
    const Eigen::Index k_count = logits.cols();
    const double inv_n = 1.0 / static_cast<double>(n);

    const Matrix logp = log_softmax(logits);
    const Matrix p = logp.array().exp().matrix();

    LossValue out;
    out.grad_logits.resize(n, k_count);
    Vector a(k_count);  // a_k = p_k * dL/dp_k for one row
    double total = 0.0;
    using T = LossKind::Type;

    for (Eigen::Index r = 0; r < n; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        const auto pr = p.row(r);
        const double logp_y = logp(r, y);
        const double p_y = pr(y);
        // 1 - p_y, summed from the other classes to keep precision near p_y = 1.
        double rest = 0.0;
        for (Eigen::Index k = 0; k < k_count; ++k)
            if (k != y) rest += pr(k);

        a.setZero();
        double value = 0.0;

        auto add_focal = [&](double gamma) {
            const double wg = std::pow(rest, gamma);
            value += -wg * logp_y;
            a(y) += focal_slope(rest, gamma) * p_y * logp_y - wg;
        };
        auto add_squared = [&](double weight) {
            for (Eigen::Index k = 0; k < k_count; ++k) {
                const double diff = pr(k) - (k == y ? 1.0 : 0.0);
                value += weight * diff * diff;
                a(k) += weight * 2.0 * pr(k) * diff;
            }
        };

        switch (kind.type) {
            case T::ce:
                value = -logp_y;
                a(y) = -1.0;
                break;
            case T::brier:
                add_squared(1.0);
                break;
            case T::focal:
                add_focal(kind.gamma);
                break;
            case T::label_smooth: {
                const double off = kind.alpha / static_cast<double>(k_count);
                for (Eigen::Index k = 0; k < k_count; ++k) {
                    const double t = (k == y ? 1.0 - kind.alpha : 0.0) + off;
                    value -= t * logp(r, k);
                    a(k) = -t;
                }
                break;
            }
            case T::dual_focal: {
                Eigen::Index j_star = -1;
                for (Eigen::Index k = 0; k < k_count; ++k)
                    if (k != y && (j_star < 0 || pr(k) > pr(j_star))) j_star = k;
                const double w = rest + pr(j_star);
                const double wg = std::pow(w, kind.gamma);
                const double slope = focal_slope(w, kind.gamma);
                value = -wg * logp_y;
                a(y) = slope * p_y * logp_y - wg;
                a(j_star) = -slope * pr(j_star) * logp_y;
                break;
            }
            case T::focal_calibration:
                add_focal(kind.gamma);
                add_squared(kind.lambda);
                break;
        }

        total += value;
        // Softmax Jacobian: dL/dz_k = a_k - p_k * sum_j a_j.
        const double a_sum = a.sum();
        for (Eigen::Index k = 0; k < k_count; ++k)
            out.grad_logits(r, k) = (a(k) - pr(k) * a_sum) * inv_n;
    }
    out.value = total * inv_n;
    return out;
}

LossOutput tsl(const LossKind& kind, const Matrix& logits, const Labels& labels,
               const TemperatureState& temp) {
    temp.validate();
    const double tau = temp.tau;
    const Matrix scaled = scale_logits(logits, tau);
    LossValue base = base_loss(kind, scaled, labels);

    LossOutput out;
    out.value = base.value;
    // z = g / tau: dL/dg = dL/dz / tau and dL/dtau = -sum dL/dz * g / tau^2.
    out.grad_tau = -(base.grad_logits.cwiseProduct(logits)).sum() / (tau * tau);
    out.grad_logits = base.grad_logits / tau;
    return out;
}

}  // namespace kancal
