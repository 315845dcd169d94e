#pragma once

// KAN layers with B-spline edge functions, a dense (MLP) baseline, and
// hand-written forward/backward passes over row-major batches.

#include <string>
#include <variant>
#include <vector>

#include "kancal/core.hpp"
#include "kancal/spline.hpp"

namespace kancal {

using Spec = SplineSpec<double>;

enum class ShortcutKind { none, identity, silu };
enum class Activation { none, relu, gelu };
enum class ModelKind { kan, mlp };

std::string to_string(ShortcutKind kind);
std::string to_string(Activation act);
std::string to_string(ModelKind kind);
ShortcutKind parse_shortcut(const std::string& name);
Activation parse_activation(const std::string& name);
ModelKind parse_model_kind(const std::string& name);

/// One KAN layer: out[i] = sum_j w_spline(i,j) * spline_ij(clamp(x_j)) + w_base(i,j) * b(x_j).
///
/// Coefficients for edge (i, j) live in row i * in_dim + j of `coeffs`.
/// With ShortcutKind::none, w_base is stored as zeros and is not a trainable
/// parameter.
struct KanLayer {
    int in_dim = 0;
    int out_dim = 0;
    Spec spec;
    ShortcutKind shortcut = ShortcutKind::silu;
    Vector knots;
    Matrix coeffs;
    Matrix w_base;
    Matrix w_spline;

    /// All-zero layer with w_spline = 1.
    static KanLayer zeros(int in_dim, int out_dim, const Spec& spec, ShortcutKind shortcut);
    static KanLayer random(int in_dim, int out_dim, const Spec& spec, ShortcutKind shortcut,
                           Rng& rng);

    int basis_count() const { return spec.basis_count(); }
    void validate() const;
};

/// Fully connected layer y = act(x W^T + b).
struct DenseLayer {
    int in_dim = 0;
    int out_dim = 0;
    Activation activation = Activation::none;
    Matrix weight;  // [out x in]
    Matrix bias;    // [1 x out]

    static DenseLayer zeros(int in_dim, int out_dim, Activation activation);
    static DenseLayer random(int in_dim, int out_dim, Activation activation, Rng& rng);
    void validate() const;
};

using Layer = std::variant<KanLayer, DenseLayer>;

struct Model {
    ModelKind kind = ModelKind::kan;
    std::vector<Layer> layers;

    int input_dim() const;
    int class_count() const;

    /// Trainable tensors in a fixed order; GradientSet and Adam buffers mirror it.
    std::vector<Matrix*> parameters();
    std::vector<const Matrix*> parameters() const;

    /// Checks adjacent dimensions and finiteness.
    void validate() const;
};

/// Gradients in the order of Model::parameters().
using GradientSet = std::vector<Matrix>;

/// widths = {input, hidden..., classes}.
Model make_kan(const std::vector<int>& widths, const Spec& spec, ShortcutKind shortcut, Rng& rng);
Model make_mlp(const std::vector<int>& widths, Activation hidden_activation, Rng& rng);

std::size_t param_count(const Model& model);

struct KanCache {
    Matrix input;
    std::vector<int> first;      // [batch * in] first active basis index
    std::vector<char> in_range;  // [batch * in]
    Matrix basis;                // [batch * in, degree + 1]
    Matrix dbasis;               // [batch * in, degree + 1]
    Matrix base;                 // [batch x in] shortcut values
    Matrix dbase;                // [batch x in] shortcut derivatives
};

struct DenseCache {
    Matrix input;
    Matrix pre;  // pre-activation
};

using LayerCache = std::variant<KanCache, DenseCache>;
using ForwardCache = std::vector<LayerCache>;

struct KanLayerGrads {
    Matrix input;  // dX
    Matrix coeffs;
    Matrix w_base;
    Matrix w_spline;
};

struct DenseLayerGrads {
    Matrix input;
    Matrix weight;
    Matrix bias;
};

/// Forward pass of one KAN layer. The cache is filled when non-null.
Matrix kan_layer_forward(const KanLayer& layer, const Matrix& x, KanCache* cache = nullptr);
KanLayerGrads kan_layer_backward(const KanLayer& layer, const KanCache& cache, const Matrix& dy);

Matrix dense_layer_forward(const DenseLayer& layer, const Matrix& x, DenseCache* cache = nullptr);
DenseLayerGrads dense_layer_backward(const DenseLayer& layer, const DenseCache& cache,
                                     const Matrix& dy);

struct ForwardResult {
    Matrix logits;
    ForwardCache caches;
};

ForwardResult forward(const Model& model, const Matrix& x);

/// Logits without keeping caches; evaluates in row chunks to bound memory.
Matrix predict_logits(const Model& model, const Matrix& x, int chunk_rows = 512);

GradientSet backward(const Model& model, const ForwardCache& caches, const Matrix& dlogits);

/// Zero-filled gradient set shaped like the model parameters.
GradientSet zero_gradients(const Model& model);

}  // namespace kancal
