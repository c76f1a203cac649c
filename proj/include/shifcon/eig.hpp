#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "shifcon/matrix.hpp"

namespace shifcon::numkit {

/// Lower-triangular L with L * L^T = a. Throws NotPositiveDefiniteError
/// (with the failing pivot index) when a is not SPD.
inline Matrix cholesky(const Matrix& a) {
    require_symmetric(a, 1e-10, "cholesky");
    const std::size_t n = a.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag))
            throw NotPositiveDefiniteError(
                "cholesky: non-positive pivot at index " + std::to_string(j), j);
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

/// Solve L * y = b for lower-triangular L (forward substitution).
inline Vec forward_solve(const Matrix& l, std::span<const double> b) {
    const std::size_t n = l.rows;
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    return y;
}

/// Solve L^T * x = b for lower-triangular L (back substitution).
inline Vec backward_solve_transposed(const Matrix& l, std::span<const double> b) {
    const std::size_t n = l.rows;
    Vec x(n);
    for (std::size_t ii = n; ii > 0; --ii) {
        const std::size_t i = ii - 1;
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
        x[i] = s / l(i, i);
    }
    return x;
}

/// Solve (L L^T) x = b given the Cholesky factor.
inline Vec cholesky_solve(const Matrix& l, std::span<const double> b) {
    return backward_solve_transposed(l, forward_solve(l, b));
}

namespace detail {

constexpr int kEigMaxSweeps = 100;

}  // namespace detail

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues sorted descending and the matching orthonormal
/// eigenvectors as columns of the second member.
inline std::pair<std::vector<double>, Matrix> sym_eigensolve(const Matrix& a_in) {
    require_symmetric(a_in, 1e-10, "sym_eigensolve");
    const std::size_t n = a_in.rows;
    Matrix a = a_in;
    // Symmetrize so rotations act on an exactly symmetric matrix.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = m;
            a(j, i) = m;
        }
    Matrix v = Matrix::identity(n);

    double scale = 0.0;
    for (double x : a.data) scale = std::max(scale, std::abs(x));
    const double tol = (scale == 0.0) ? 0.0 : 1e-14 * scale;

    int sweep = 0;
    for (; sweep < detail::kEigMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
        if (off <= tol) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= tol) continue;
                const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;

                const double app = a(p, p), aqq = a(q, q);
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(p, i) = a(i, p);
                    a(i, q) = s * aip + c * aiq;
                    a(q, i) = a(i, q);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    if (sweep == detail::kEigMaxSweeps)
        throw NumericalError("sym_eigensolve: Jacobi did not converge after " +
                             std::to_string(detail::kEigMaxSweeps) + " sweeps");

    std::vector<double> lambda(n);
    for (std::size_t i = 0; i < n; ++i) lambda[i] = a(i, i);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return lambda[x] > lambda[y]; });

    std::vector<double> sorted(n);
    Matrix vs(n, n);
    for (std::size_t jj = 0; jj < n; ++jj) {
        sorted[jj] = lambda[order[jj]];
        for (std::size_t i = 0; i < n; ++i) vs(i, jj) = v(i, order[jj]);
    }
    return {std::move(sorted), std::move(vs)};
}

/// Eigenvalues of a^{-1} * b for SPD a, b, sorted descending. Computed by
/// whitening with the Cholesky factor of a (C = L^{-1} b L^{-T}) followed by
/// a symmetric eigensolve; a^{-1} is never formed.
inline std::vector<double> spd_pencil_eigenvalues(const Matrix& a, const Matrix& b) {
    if (a.rows != a.cols || b.rows != b.cols || a.rows != b.rows)
        throw InvalidInputError("spd_pencil_eigenvalues: dimension mismatch");
    require_symmetric(b, 1e-10, "spd_pencil_eigenvalues");
    const std::size_t n = a.rows;
    const Matrix l = cholesky(a);

    // y = L^{-1} b, then c^T = L^{-1} y^T, i.e. c = L^{-1} b L^{-T}.
    Matrix y(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        Vec col(n);
        for (std::size_t i = 0; i < n; ++i) col[i] = b(i, j);
        Vec sol = forward_solve(l, col);
        for (std::size_t i = 0; i < n; ++i) y(i, j) = sol[i];
    }
    Matrix c(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec sol = forward_solve(l, y.row(i));
        for (std::size_t j = 0; j < n; ++j) c(i, j) = sol[j];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (c(i, j) + c(j, i));
            c(i, j) = m;
            c(j, i) = m;
        }

    auto [lambda, vecs] = sym_eigensolve(c);
    (void)vecs;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(lambda[i] > 0.0))
            throw NotPositiveDefiniteError(
                "spd_pencil_eigenvalues: pencil eigenvalue " + std::to_string(i) +
                    " is not positive (second operand not positive definite)",
                i);
    }
    return lambda;
}

}  // namespace shifcon::numkit
