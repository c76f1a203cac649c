#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "shifcon/common.hpp"

namespace shifcon::numkit {

using Vec = std::vector<double>;

/// Dense row-major matrix of doubles. All geometry and model math runs on
/// this one type; shapes are validated by the operations, not the container.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows = init.size();
        cols = rows ? init.begin()->size() : 0;
        data.reserve(rows * cols);
        for (const auto& row : init) {
            if (row.size() != cols) throw InvalidInputError("matrix literal has ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(const std::vector<Vec>& rows_in) {
        if (rows_in.empty()) return {};
        Matrix m(rows_in.size(), rows_in.front().size());
        for (std::size_t i = 0; i < rows_in.size(); ++i) {
            if (rows_in[i].size() != m.cols) throw InvalidInputError("from_rows: ragged rows");
            std::copy(rows_in[i].begin(), rows_in[i].end(), m.row(i).begin());
        }
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw InvalidInputError("matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            double* crow = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

inline Vec matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols != x.size()) throw InvalidInputError("matvec: dimension mismatch");
    Vec y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        const double* arow = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < a.cols; ++j) s += arow[j] * x[j];
        y[i] = s;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidInputError("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& a) {
    return norm2(std::span<const double>(a.data.data(), a.data.size()));
}

/// Columnwise mean, anchored at the first row so that a matrix of identical
/// rows averages to that row bit-exactly.
inline Vec column_mean(const Matrix& a) {
    if (a.rows == 0) throw InvalidInputError("column_mean: empty matrix");
    Vec mu(a.cols, 0.0);
    for (std::size_t i = 1; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) mu[j] += a(i, j) - a(0, j);
    for (std::size_t j = 0; j < a.cols; ++j)
        mu[j] = a(0, j) + mu[j] / static_cast<double>(a.rows);
    return mu;
}

inline double trace(const Matrix& a) {
    if (a.rows != a.cols) throw InvalidInputError("trace: matrix not square");
    double t = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) t += a(i, i);
    return t;
}

/// max |a_ij - a_ji|, the symmetry defect.
inline double asymmetry(const Matrix& a) {
    if (a.rows != a.cols) throw InvalidInputError("asymmetry: matrix not square");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = i + 1; j < a.cols; ++j)
            worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
    return worst;
}

inline void require_symmetric(const Matrix& a, double tol, const std::string& who) {
    if (a.rows != a.cols) throw InvalidInputError(who + ": matrix not square");
    double scale = 0.0;
    for (double v : a.data) scale = std::max(scale, std::abs(v));
    if (asymmetry(a) > tol * std::max(1.0, scale))
        throw InvalidInputError(who + ": matrix not symmetric within tolerance");
}

}  // namespace shifcon::numkit
