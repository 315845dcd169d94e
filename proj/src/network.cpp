#include "kancal/network.hpp"

#include <cmath>
#include <numbers>

namespace kancal {

namespace {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void shortcut_value(ShortcutKind kind, double x, double& value, double& deriv) {
    switch (kind) {
        case ShortcutKind::none:
            value = 0.0;
            deriv = 0.0;
            return;
        case ShortcutKind::identity:
            value = x;
            deriv = 1.0;
            return;
        case ShortcutKind::silu: {
            const double s = sigmoid(x);
            value = x * s;
            deriv = s * (1.0 + x * (1.0 - s));
            return;
        }
    }
}

double activate(Activation act, double z) {
    switch (act) {
        case Activation::none: return z;
        case Activation::relu: return z > 0 ? z : 0.0;
        case Activation::gelu: return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
    }
    return z;
}

double activate_grad(Activation act, double z) {
    switch (act) {
        case Activation::none: return 1.0;
        case Activation::relu: return z > 0 ? 1.0 : 0.0;
        case Activation::gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + z * pdf;
        }
    }
    return 1.0;
}

void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw ConfigError(std::string(what) + " contains non-finite values");
}

}  // namespace

std::string to_string(ShortcutKind kind) {
    switch (kind) {
        case ShortcutKind::none: return "none";
        case ShortcutKind::identity: return "identity";
        case ShortcutKind::silu: return "silu";
    }
    return "?";
}

std::string to_string(Activation act) {
    switch (act) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
    }
    return "?";
}

std::string to_string(ModelKind kind) { return kind == ModelKind::kan ? "kan" : "mlp"; }

ShortcutKind parse_shortcut(const std::string& name) {
    if (name == "none") return ShortcutKind::none;
    if (name == "identity") return ShortcutKind::identity;
    if (name == "silu") return ShortcutKind::silu;
    throw ConfigError("unknown shortcut kind '" + name + "'");
}

Activation parse_activation(const std::string& name) {
    if (name == "none") return Activation::none;
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + name + "'");
}

ModelKind parse_model_kind(const std::string& name) {
    if (name == "kan") return ModelKind::kan;
    if (name == "mlp") return ModelKind::mlp;
    throw ConfigError("unknown model kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// KAN layer

KanLayer KanLayer::zeros(int in_dim, int out_dim, const Spec& spec, ShortcutKind shortcut) {
    if (in_dim < 1 || out_dim < 1) throw ConfigError("kan layer: dimensions must be positive");
    KanLayer layer;
    layer.in_dim = in_dim;
    layer.out_dim = out_dim;
    layer.spec = spec;
    layer.shortcut = shortcut;
    layer.knots = build_knots(spec);
    layer.coeffs = Matrix::Zero(out_dim * in_dim, spec.basis_count());
    layer.w_base = Matrix::Zero(out_dim, in_dim);
    layer.w_spline = Matrix::Ones(out_dim, in_dim);
    return layer;
}

KanLayer KanLayer::random(int in_dim, int out_dim, const Spec& spec, ShortcutKind shortcut,
                          Rng& rng) {
    KanLayer layer = zeros(in_dim, out_dim, spec, shortcut);
    const double coeff_std = 0.1 / std::sqrt(static_cast<double>(spec.basis_count()));
    for (Eigen::Index i = 0; i < layer.coeffs.size(); ++i)
        layer.coeffs.data()[i] = coeff_std * rng.normal();
    if (shortcut != ShortcutKind::none) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (Eigen::Index i = 0; i < layer.w_base.size(); ++i)
            layer.w_base.data()[i] = rng.uniform(-bound, bound);
    }
    return layer;
}

void KanLayer::validate() const {
    spec.validate();
    if (in_dim < 1 || out_dim < 1) throw ConfigError("kan layer: dimensions must be positive");
    if (knots.size() != spec.knot_count()) throw ConfigError("kan layer: knot vector size mismatch");
    if (coeffs.rows() != out_dim * in_dim || coeffs.cols() != spec.basis_count())
        throw ConfigError("kan layer: coefficient shape mismatch");
    if (w_base.rows() != out_dim || w_base.cols() != in_dim || w_spline.rows() != out_dim ||
        w_spline.cols() != in_dim)
        throw ConfigError("kan layer: weight shape mismatch");
    require_finite(coeffs, "kan coefficients");
    require_finite(w_base, "kan w_base");
    require_finite(w_spline, "kan w_spline");
}

Matrix kan_layer_forward(const KanLayer& layer, const Matrix& x, KanCache* cache) {
    if (x.cols() != layer.in_dim)
        throw ConfigError("kan_layer_forward: expected " + std::to_string(layer.in_dim) +
                          " input columns, got " + std::to_string(x.cols()));
    const Eigen::Index batch = x.rows();
    const int in = layer.in_dim;
    const int out = layer.out_dim;
    const int width = layer.spec.degree + 1;
    const bool has_base = layer.shortcut != ShortcutKind::none;

    if (cache) {
        cache->input = x;
        cache->first.assign(static_cast<std::size_t>(batch * in), 0);
        cache->in_range.assign(static_cast<std::size_t>(batch * in), 1);
        cache->basis.resize(batch * in, width);
        cache->dbasis.resize(batch * in, width);
        cache->base.resize(batch, in);
        cache->dbase.resize(batch, in);
    }

    Matrix y = Matrix::Zero(batch, out);
    std::vector<int> first(static_cast<std::size_t>(in));
    Matrix basis(in, width);
    Vector base(in);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int j = 0; j < in; ++j) {
            const auto active = active_basis(layer.knots, layer.spec.degree, x(b, j));
            first[j] = active.first;
            basis.row(j) = active.values.transpose();
            double dv = 0.0;
            shortcut_value(layer.shortcut, x(b, j), base[j], dv);
            if (cache) {
                const auto k = static_cast<std::size_t>(b * in + j);
                cache->first[k] = active.first;
                cache->in_range[k] = active.in_range ? 1 : 0;
                cache->basis.row(b * in + j) = active.values.transpose();
                cache->dbasis.row(b * in + j) = active.derivatives.transpose();
                cache->base(b, j) = base[j];
                cache->dbase(b, j) = dv;
            }
        }
        for (int i = 0; i < out; ++i) {
            double acc = 0.0;
            for (int j = 0; j < in; ++j) {
                const auto c = layer.coeffs.row(i * in + j).segment(first[j], width);
                acc += layer.w_spline(i, j) * c.dot(basis.row(j));
                if (has_base) acc += layer.w_base(i, j) * base[j];
            }
            y(b, i) = acc;
        }
    }
    return y;
}

KanLayerGrads kan_layer_backward(const KanLayer& layer, const KanCache& cache, const Matrix& dy) {
    const Eigen::Index batch = cache.input.rows();
    const int in = layer.in_dim;
    const int out = layer.out_dim;
    const int width = layer.spec.degree + 1;
    if (cache.input.cols() != in || cache.basis.rows() != batch * in ||
        cache.basis.cols() != width)
        throw ConfigError("kan_layer_backward: cache does not match layer");
    if (dy.rows() != batch || dy.cols() != out)
        throw ConfigError("kan_layer_backward: upstream gradient shape mismatch");

    const bool has_base = layer.shortcut != ShortcutKind::none;
    KanLayerGrads g;
    g.input = Matrix::Zero(batch, in);
    g.coeffs = Matrix::Zero(layer.coeffs.rows(), layer.coeffs.cols());
    g.w_base = Matrix::Zero(out, in);
    g.w_spline = Matrix::Zero(out, in);

    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int j = 0; j < in; ++j) {
            const Eigen::Index k = b * in + j;
            const int first = cache.first[static_cast<std::size_t>(k)];
            const bool inside = cache.in_range[static_cast<std::size_t>(k)] != 0;
            const auto basis = cache.basis.row(k);
            const auto dbasis = cache.dbasis.row(k);
            double dx = 0.0;
            for (int i = 0; i < out; ++i) {
                const double up = dy(b, i);
                if (up == 0.0) continue;
                const Eigen::Index row = i * in + j;
                const auto c = layer.coeffs.row(row).segment(first, width);
                const double ws = layer.w_spline(i, j);
                g.coeffs.row(row).segment(first, width) += (up * ws) * basis;
                g.w_spline(i, j) += up * c.dot(basis);
                if (inside) dx += up * ws * c.dot(dbasis);
                if (has_base) {
                    g.w_base(i, j) += up * cache.base(b, j);
                    dx += up * layer.w_base(i, j) * cache.dbase(b, j);
                }
            }
            g.input(b, j) = dx;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Dense layer

DenseLayer DenseLayer::zeros(int in_dim, int out_dim, Activation activation) {
    if (in_dim < 1 || out_dim < 1) throw ConfigError("dense layer: dimensions must be positive");
    DenseLayer layer;
    layer.in_dim = in_dim;
    layer.out_dim = out_dim;
    layer.activation = activation;
    layer.weight = Matrix::Zero(out_dim, in_dim);
    layer.bias = Matrix::Zero(1, out_dim);
    return layer;
}

DenseLayer DenseLayer::random(int in_dim, int out_dim, Activation activation, Rng& rng) {
    DenseLayer layer = zeros(in_dim, out_dim, activation);
    // Kaiming-uniform with a = sqrt(5): bound = 1 / sqrt(fan_in) for weights and bias.
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
        layer.weight.data()[i] = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
        layer.bias.data()[i] = rng.uniform(-bound, bound);
    return layer;
}

void DenseLayer::validate() const {
    if (weight.rows() != out_dim || weight.cols() != in_dim || bias.rows() != 1 ||
        bias.cols() != out_dim)
        throw ConfigError("dense layer: shape mismatch");
    require_finite(weight, "dense weight");
    require_finite(bias, "dense bias");
}

Matrix dense_layer_forward(const DenseLayer& layer, const Matrix& x, DenseCache* cache) {
    if (x.cols() != layer.in_dim)
        throw ConfigError("dense_layer_forward: expected " + std::to_string(layer.in_dim) +
                          " input columns, got " + std::to_string(x.cols()));
    Matrix pre = x * layer.weight.transpose();
    pre.rowwise() += layer.bias.row(0);
    Matrix y = pre.unaryExpr([&](double z) { return activate(layer.activation, z); });
    if (cache) {
        cache->input = x;
        cache->pre = std::move(pre);
    }
    return y;
}

DenseLayerGrads dense_layer_backward(const DenseLayer& layer, const DenseCache& cache,
                                     const Matrix& dy) {
    if (dy.rows() != cache.pre.rows() || dy.cols() != layer.out_dim ||
        cache.input.cols() != layer.in_dim)
        throw ConfigError("dense_layer_backward: cache does not match layer");
    const Matrix dpre =
        dy.cwiseProduct(cache.pre.unaryExpr([&](double z) { return activate_grad(layer.activation, z); }));
    DenseLayerGrads g;
    g.weight = dpre.transpose() * cache.input;
    g.bias = dpre.colwise().sum();
    g.input = dpre * layer.weight;
    return g;
}

// ---------------------------------------------------------------------------
// Model

int Model::input_dim() const {
    if (layers.empty()) throw ConfigError("model has no layers");
    return std::visit([](const auto& l) { return l.in_dim; }, layers.front());
}

int Model::class_count() const {
    if (layers.empty()) throw ConfigError("model has no layers");
    return std::visit([](const auto& l) { return l.out_dim; }, layers.back());
}

std::vector<Matrix*> Model::parameters() {
    std::vector<Matrix*> out;
    for (auto& layer : layers) {
        if (auto* kan = std::get_if<KanLayer>(&layer)) {
            out.push_back(&kan->coeffs);
            out.push_back(&kan->w_spline);
            if (kan->shortcut != ShortcutKind::none) out.push_back(&kan->w_base);
        } else {
            auto& dense = std::get<DenseLayer>(layer);
            out.push_back(&dense.weight);
            out.push_back(&dense.bias);
        }
    }
    return out;
}

std::vector<const Matrix*> Model::parameters() const {
    auto mutable_params = const_cast<Model*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

void Model::validate() const {
    if (layers.empty()) throw ConfigError("model has no layers");
    int prev = -1;
    for (const auto& layer : layers) {
        std::visit(
            [&](const auto& l) {
                l.validate();
                if (prev >= 0 && l.in_dim != prev)
                    throw ConfigError("model: adjacent layer dimensions disagree");
                prev = l.out_dim;
            },
            layer);
        const bool is_kan = std::holds_alternative<KanLayer>(layer);
        if (is_kan != (kind == ModelKind::kan))
            throw ConfigError("model: layer type does not match model kind");
    }
    if (class_count() < 2) throw ConfigError("model: need at least 2 output classes");
}

Model make_kan(const std::vector<int>& widths, const Spec& spec, ShortcutKind shortcut, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("make_kan: need at least input and output widths");
    Model model;
    model.kind = ModelKind::kan;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
        model.layers.emplace_back(KanLayer::random(widths[l], widths[l + 1], spec, shortcut, rng));
    model.validate();
    return model;
}

Model make_mlp(const std::vector<int>& widths, Activation hidden_activation, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
    Model model;
    model.kind = ModelKind::mlp;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const bool last = l + 2 == widths.size();
        model.layers.emplace_back(DenseLayer::random(
            widths[l], widths[l + 1], last ? Activation::none : hidden_activation, rng));
    }
    model.validate();
    return model;
}

std::size_t param_count(const Model& model) {
    std::size_t n = 0;
    for (const Matrix* p : model.parameters()) n += static_cast<std::size_t>(p->size());
    return n;
}

ForwardResult forward(const Model& model, const Matrix& x) {
    ForwardResult result;
    result.caches.reserve(model.layers.size());
    Matrix h = x;
    for (const auto& layer : model.layers) {
        if (const auto* kan = std::get_if<KanLayer>(&layer)) {
            KanCache cache;
            h = kan_layer_forward(*kan, h, &cache);
            result.caches.emplace_back(std::move(cache));
        } else {
            DenseCache cache;
            h = dense_layer_forward(std::get<DenseLayer>(layer), h, &cache);
            result.caches.emplace_back(std::move(cache));
        }
    }
    result.logits = std::move(h);
    return result;
}

Matrix predict_logits(const Model& model, const Matrix& x, int chunk_rows) {
    if (chunk_rows < 1) chunk_rows = 1;
    Matrix out(x.rows(), model.class_count());
    for (Eigen::Index start = 0; start < x.rows(); start += chunk_rows) {
        const Eigen::Index rows = std::min<Eigen::Index>(chunk_rows, x.rows() - start);
        Matrix h = x.middleRows(start, rows);
        for (const auto& layer : model.layers) {
            if (const auto* kan = std::get_if<KanLayer>(&layer)) h = kan_layer_forward(*kan, h);
            else h = dense_layer_forward(std::get<DenseLayer>(layer), h);
        }
        out.middleRows(start, rows) = h;
    }
    return out;
}

GradientSet zero_gradients(const Model& model) {
    GradientSet grads;
    for (const Matrix* p : model.parameters()) grads.push_back(Matrix::Zero(p->rows(), p->cols()));
    return grads;
}

GradientSet backward(const Model& model, const ForwardCache& caches, const Matrix& dlogits) {
    if (caches.size() != model.layers.size())
        throw ConfigError("backward: cache count does not match layer count");

    // Per-layer gradients are collected back to front, then flattened in
    // parameter order.
    std::vector<std::vector<Matrix>> per_layer(model.layers.size());
    Matrix upstream = dlogits;
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const auto& layer = model.layers[l];
        if (const auto* kan = std::get_if<KanLayer>(&layer)) {
            const auto* cache = std::get_if<KanCache>(&caches[l]);
            if (!cache) throw ConfigError("backward: cache kind mismatch");
            auto g = kan_layer_backward(*kan, *cache, upstream);
            per_layer[l].push_back(std::move(g.coeffs));
            per_layer[l].push_back(std::move(g.w_spline));
            if (kan->shortcut != ShortcutKind::none) per_layer[l].push_back(std::move(g.w_base));
            upstream = std::move(g.input);
        } else {
            const auto* cache = std::get_if<DenseCache>(&caches[l]);
            if (!cache) throw ConfigError("backward: cache kind mismatch");
            auto g = dense_layer_backward(std::get<DenseLayer>(layer), *cache, upstream);
            per_layer[l].push_back(std::move(g.weight));
            per_layer[l].push_back(std::move(g.bias));
            upstream = std::move(g.input);
        }
    }
    GradientSet grads;
    for (auto& layer_grads : per_layer)
        for (auto& g : layer_grads) grads.push_back(std::move(g));
    return grads;
}

}  // namespace kancal
