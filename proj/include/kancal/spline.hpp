#pragma once

// B-spline knots and basis functions.
//
// Knots are uniform with `degree` extra steps beyond each end of the grid
// range, so the G + d basis functions form a partition of unity on the whole
// range [grid_min, grid_max]. Inputs are clamped to that range before
// evaluation.

#include <algorithm>
#include <cmath>
#include <string>

#include "kancal/core.hpp"

namespace kancal {

inline constexpr int kMaxSplineDegree = 15;

template <typename Scalar>
struct SplineSpec {
    Scalar grid_min = Scalar(-1);
    Scalar grid_max = Scalar(1);
    int grid_size = 5;  // number of grid intervals G
    int degree = 3;     // polynomial degree d (order d + 1)

    int basis_count() const { return grid_size + degree; }
    int knot_count() const { return grid_size + 2 * degree + 1; }
    Scalar step() const { return (grid_max - grid_min) / Scalar(grid_size); }

    void validate() const {
        if (!(grid_min < grid_max))
            throw ConfigError("spline: grid_min must be < grid_max");
        if (grid_size < 1) throw ConfigError("spline: grid_size must be >= 1");
        if (degree < 1 || degree > kMaxSplineDegree)
            throw ConfigError("spline: degree must be in [1, " +
                              std::to_string(kMaxSplineDegree) + "]");
    }
};

template <typename Scalar>
VectorX<Scalar> build_knots(const SplineSpec<Scalar>& spec) {
    spec.validate();
    const int n = spec.knot_count();
    const Scalar h = spec.step();
    VectorX<Scalar> knots(n);
    for (int i = 0; i < n; ++i) knots[i] = spec.grid_min + Scalar(i - spec.degree) * h;
    // Pin the range ends exactly; (G * h) need not round back to grid_max.
    knots[spec.degree] = spec.grid_min;
    knots[spec.degree + spec.grid_size] = spec.grid_max;
    return knots;
}

/// Values (and first derivatives) of the at most degree + 1 basis functions
/// that are nonzero at a point. Entry r belongs to basis function first + r.
template <typename Scalar>
struct ActiveBasis {
    using Small = Eigen::Matrix<Scalar, Eigen::Dynamic, 1, 0, kMaxSplineDegree + 1, 1>;
    int first = 0;
    bool in_range = true;  // false when the input was clamped
    Small values;
    Small derivatives;
};

namespace detail {

template <typename Scalar, typename Knots>
int basis_count_of(const Knots& knots, int degree) {
    const int n = static_cast<int>(knots.size()) - degree - 1;
    if (degree < 0 || degree > kMaxSplineDegree) throw ConfigError("spline: degree out of range");
    if (n < 1) throw ConfigError("spline: knot vector too short for degree");
    return n;
}

/// Index i with knots[i] <= x < knots[i+1], restricted to [degree, n - 1].
template <typename Knots, typename Scalar>
int find_span(const Knots& knots, int degree, int n, Scalar x) {
    if (x >= knots[n]) return n - 1;
    if (x <= knots[degree]) return degree;
    int lo = degree, hi = n;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        if (x < knots[mid]) hi = mid;
        else lo = mid;
    }
    return lo;
}

}  // namespace detail

/// Nonzero basis values and derivatives at x (after clamping to the grid range).
template <typename Knots>
ActiveBasis<typename Knots::Scalar> active_basis(const Knots& knots, int degree,
                                                 typename Knots::Scalar x) {
    using Scalar = typename Knots::Scalar;
    const int n = detail::basis_count_of<Scalar>(knots, degree);
    const Scalar lo = knots[degree];
    const Scalar hi = knots[n];

    ActiveBasis<Scalar> out;
    out.in_range = (x >= lo && x <= hi);
    x = std::clamp(x, lo, hi);
    const int span = detail::find_span(knots, degree, n, x);
    out.first = span - degree;

    // Triangular Cox-de Boor table. `lower` keeps the degree - 1 row.
    Scalar left[kMaxSplineDegree + 1];
    Scalar right[kMaxSplineDegree + 1];
    Scalar row[kMaxSplineDegree + 1];
    Scalar lower[kMaxSplineDegree + 1];
    row[0] = Scalar(1);
    for (int j = 1; j <= degree; ++j) {
        if (j == degree)
            for (int r = 0; r < degree; ++r) lower[r] = row[r];
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        Scalar saved = Scalar(0);
        for (int r = 0; r < j; ++r) {
            const Scalar denom = right[r + 1] + left[j - r];
            const Scalar temp = denom != Scalar(0) ? row[r] / denom : Scalar(0);
            row[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        row[j] = saved;
    }

    out.values.resize(degree + 1);
    out.derivatives.resize(degree + 1);
    for (int r = 0; r <= degree; ++r) out.values[r] = row[r];

    // B'_{k,d} = d * (B_{k,d-1} / (t_{k+d} - t_k) - B_{k+1,d-1} / (t_{k+d+1} - t_{k+1}))
    // lower[r] holds B_{first+1+r, d-1}.
    for (int r = 0; r <= degree; ++r) {
        const int k = out.first + r;
        Scalar d = Scalar(0);
        if (r >= 1) {
            const Scalar w = knots[k + degree] - knots[k];
            if (w != Scalar(0)) d += lower[r - 1] / w;
        }
        if (r < degree) {
            const Scalar w = knots[k + degree + 1] - knots[k + 1];
            if (w != Scalar(0)) d -= lower[r] / w;
        }
        out.derivatives[r] = Scalar(degree) * d;
    }
    return out;
}

/// All G + d basis values at x.
template <typename Knots>
VectorX<typename Knots::Scalar> basis_eval(const Knots& knots, int degree,
                                           typename Knots::Scalar x) {
    using Scalar = typename Knots::Scalar;
    const int n = detail::basis_count_of<Scalar>(knots, degree);
    const auto active = active_basis(knots, degree, x);
    VectorX<Scalar> out = VectorX<Scalar>::Zero(n);
    out.segment(active.first, degree + 1) = active.values;
    return out;
}

/// d/dx of every basis function evaluated at clamp(x). Zero outside the
/// grid range, where the clamp is flat.
template <typename Knots>
VectorX<typename Knots::Scalar> basis_grad(const Knots& knots, int degree,
                                           typename Knots::Scalar x) {
    using Scalar = typename Knots::Scalar;
    const int n = detail::basis_count_of<Scalar>(knots, degree);
    const auto active = active_basis(knots, degree, x);
    VectorX<Scalar> out = VectorX<Scalar>::Zero(n);
    if (active.in_range) out.segment(active.first, degree + 1) = active.derivatives;
    return out;
}

template <typename Coeffs, typename Knots>
typename Knots::Scalar spline_eval(const Eigen::MatrixBase<Coeffs>& coeffs, const Knots& knots,
                                   int degree, typename Knots::Scalar x) {
    const int n = detail::basis_count_of<typename Knots::Scalar>(knots, degree);
    if (coeffs.size() != n)
        throw ConfigError("spline_eval: expected " + std::to_string(n) + " coefficients, got " +
                          std::to_string(coeffs.size()));
    const auto active = active_basis(knots, degree, x);
    typename Knots::Scalar sum(0);
    for (int r = 0; r <= degree; ++r) sum += coeffs.derived()(active.first + r) * active.values[r];
    return sum;
}

}  // namespace kancal
