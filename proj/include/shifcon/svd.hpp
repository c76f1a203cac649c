#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "shifcon/matrix.hpp"

namespace shifcon::numkit {

/// Thin SVD: u is n x r, vt is r x d with r = min(n, d); singular values
/// are sorted descending and u, vt have orthonormal columns/rows.
struct SvdResult {
    Matrix u;
    std::vector<double> singular_values;
    Matrix vt;
};

namespace detail {

constexpr int kSvdMaxSweeps = 60;
constexpr double kSvdRelTol = 1e-12;

// One-sided Jacobi on a tall matrix (rows >= cols): orthogonalize column
// pairs of B by plane rotations, accumulating them into V so that the
// original matrix equals B_final * V^T.
inline void jacobi_orthogonalize(Matrix& b, Matrix& v) {
    const std::size_t n = b.rows, d = b.cols;
    int sweep = 0;
    for (; sweep < kSvdMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= kSvdRelTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = c * bp - s * bq;
                    b(i, q) = s * bp + c * bq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
    if (sweep == kSvdMaxSweeps)
        throw NumericalError("svd: one-sided Jacobi did not converge after " +
                             std::to_string(kSvdMaxSweeps) + " sweeps");
}

// Fill column `col` of u with a unit vector orthogonal to columns [0, col)
// (needed when the input is rank deficient).
inline void complete_orthonormal_column(Matrix& u, std::size_t col) {
    const std::size_t n = u.rows;
    Vec best;
    double best_norm = -1.0;
    for (std::size_t cand = 0; cand < n; ++cand) {
        Vec w(n, 0.0);
        w[cand] = 1.0;
        for (std::size_t j = 0; j < col; ++j) {
            double proj = 0.0;
            for (std::size_t i = 0; i < n; ++i) proj += w[i] * u(i, j);
            for (std::size_t i = 0; i < n; ++i) w[i] -= proj * u(i, j);
        }
        const double nrm = norm2(w);
        if (nrm > best_norm) {
            best_norm = nrm;
            best = std::move(w);
        }
        if (best_norm > 0.5) break;  // good enough, stay deterministic
    }
    if (best_norm <= 0.0) throw NumericalError("svd: cannot complete orthonormal basis");
    for (std::size_t i = 0; i < n; ++i) u(i, col) = best[i] / best_norm;
}

// Tall case worker (rows >= cols).
inline SvdResult svd_tall(const Matrix& x) {
    const std::size_t n = x.rows, d = x.cols;
    Matrix b = x;
    Matrix v = Matrix::identity(d);
    jacobi_orthogonalize(b, v);

    std::vector<double> sigma(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += b(i, j) * b(i, j);
        sigma[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return sigma[a] > sigma[c]; });

    SvdResult out;
    out.u = Matrix(n, d);
    out.vt = Matrix(d, d);
    out.singular_values.resize(d);
    for (std::size_t jj = 0; jj < d; ++jj) {
        const std::size_t j = order[jj];
        out.singular_values[jj] = sigma[j];
        for (std::size_t i = 0; i < d; ++i) out.vt(jj, i) = v(i, j);
        if (sigma[j] > 0.0) {
            for (std::size_t i = 0; i < n; ++i) out.u(i, jj) = b(i, j) / sigma[j];
        } else {
            complete_orthonormal_column(out.u, jj);
        }
    }
    return out;
}

}  // namespace detail

inline SvdResult svd(const Matrix& x) {
    if (x.rows == 0 || x.cols == 0) throw InvalidInputError("svd: empty matrix");
    if (!x.all_finite()) throw InvalidInputError("svd: input has non-finite entries");
    if (x.rows >= x.cols) return detail::svd_tall(x);
    // Wide case: decompose the transpose and swap the factors.
    SvdResult t = detail::svd_tall(transpose(x));
    SvdResult out;
    out.singular_values = std::move(t.singular_values);
    out.u = transpose(t.vt);
    out.vt = transpose(t.u);
    return out;
}

/// U * diag(sigma) * Vt, for reconstruction checks.
inline Matrix svd_reconstruct(const SvdResult& r) {
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows; ++i)
        for (std::size_t j = 0; j < us.cols; ++j) us(i, j) *= r.singular_values[j];
    return matmul(us, r.vt);
}

}  // namespace shifcon::numkit
