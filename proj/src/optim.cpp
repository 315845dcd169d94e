#include "kancal/optim.hpp"

#include <cmath>

namespace kancal {

void adam_step(AdamState& state, const std::vector<Matrix*>& params, const GradientSet& grads,
               double lr) {
    if (params.size() != grads.size())
        throw ConfigError("adam_step: parameter and gradient counts differ");
    if (state.m.empty()) {
        for (const Matrix* p : params) {
            state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (state.m.size() != params.size()) throw ConfigError("adam_step: state size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
            state.m[i].rows() != grads[i].rows() || state.m[i].cols() != grads[i].cols())
            throw ConfigError("adam_step: shape mismatch at tensor " + std::to_string(i));
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto m = state.m[i].array();
        auto v = state.v[i].array();
        const auto g = grads[i].array();
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.square();
        params[i]->array() -= lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
    }
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr < 0 || lr_after_decay < 0 || tau_learning_rate() < 0)
        throw ConfigError("train: learning rates must be nonnegative");
    if (!(tau_min > 0 && tau_min <= tau0 && tau0 <= tau_max))
        throw ConfigError("train: need 0 < tau_min <= tau0 <= tau_max");
    if (eval_bins < 1) throw ConfigError("train: eval_bins must be >= 1");
    loss.validate();
}

TrainResult train(Model& model, const Dataset& data, const Dataset& eval,
                  const TrainConfig& config, const StepObserver& on_step,
                  const EpochObserver& on_epoch) {
    config.validate();
    model.validate();
    data.validate();
    if (data.size() == 0) throw DataError("train: empty dataset");
    if (data.dim() != model.input_dim())
        throw ConfigError("train: data has " + std::to_string(data.dim()) +
                          " features, model expects " + std::to_string(model.input_dim()));
    if (data.class_count > model.class_count() || eval.class_count > model.class_count())
        throw ConfigError("train: model has fewer outputs than the data has classes");

    const double tau_lr = config.tau_learning_rate();
    TemperatureState temp;
    temp.tau = config.tsl_enabled ? config.tau0 : 1.0;
    temp.tau_min = config.tsl_enabled ? config.tau_min : 1.0;
    temp.tau_max = config.tsl_enabled ? config.tau_max : 1.0;
    temp.lr_tau = tau_lr;

    AdamState adam;
    TrainResult result;
    const auto n = static_cast<std::size_t>(data.size());
    const auto batch = static_cast<std::size_t>(config.batch_size);
    long step = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const double lr = config.learning_rate(epoch);
        Rng rng(Rng::derive(config.seed, static_cast<std::uint64_t>(epoch)));
        const auto order = rng.permutation(n);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            Matrix x(static_cast<Eigen::Index>(end - start), data.dim());
            Labels y(end - start);
            for (std::size_t i = start; i < end; ++i) {
                x.row(static_cast<Eigen::Index>(i - start)) =
                    data.features.row(static_cast<Eigen::Index>(order[i]));
                y[i - start] = data.labels[order[i]];
            }

            const ForwardResult fwd = forward(model, x);
            const LossOutput loss = tsl(config.loss, fwd.logits, y, temp);
            if (!std::isfinite(loss.value) || !std::isfinite(loss.grad_tau))
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                      ", step " + std::to_string(step + 1));
            const GradientSet grads = backward(model, fwd.caches, loss.grad_logits);
            adam_step(adam, model.parameters(), grads, lr);
            if (config.tsl_enabled)
                temp.tau = project_tau(temp.tau - tau_lr * loss.grad_tau, temp.tau_min, temp.tau_max);

            loss_sum += loss.value * static_cast<double>(end - start);
            ++step;
            if (on_step) on_step({epoch, step, loss.value, temp.tau, loss.grad_tau});
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(n);
        record.tau = temp.tau;
        record.lr = lr;
        const Matrix logits = predict_logits(model, eval.features);
        if (!logits.allFinite())
            throw DivergenceError("train: non-finite evaluation logits at epoch " + std::to_string(epoch));
        record.report = evaluate(EvalSet::from_logits(logits, eval.labels, temp.tau), config.eval_bins,
                                 config.eval_smece_bandwidth);
        record.test_accuracy = record.report.accuracy;
        if (on_epoch) on_epoch(record);
        result.history.epochs.push_back(record);
    }
    result.tau = temp.tau;
    return result;
}

}  // namespace kancal
