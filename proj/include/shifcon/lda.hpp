#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "shifcon/eig.hpp"
#include "shifcon/matrix.hpp"

namespace shifcon::geometry {

/// Pass as `ridge` to lda_fit for the default within-class regularizer.
constexpr double kAutoLdaRidge = -1.0;

/// Fisher discriminant projection: columns of w are the eigenvectors of
/// S_w^{-1} S_b in eigenvalue-descending order, unit-normalized.
struct LdaProjection {
    Matrix w;  // d x c
    Vec global_mean;
    std::vector<Vec> class_means;
    int component_count = 0;
};

/// Fit LDA on row samples x with integer class labels 0..K-1.
/// `components` must not exceed K-1 (the rank of the between-class scatter).
inline LdaProjection lda_fit(const Matrix& x, const std::vector<int>& labels, int components,
                             double ridge = kAutoLdaRidge) {
    if (x.rows != labels.size()) throw InvalidInputError("lda_fit: labels do not match rows");
    if (x.rows < 2) throw InvalidInputError("lda_fit: need at least 2 samples");
    const std::size_t d = x.cols;
    const int num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    if (num_classes < 2) throw InvalidInputError("lda_fit: need at least 2 classes");
    if (components < 1 || components > num_classes - 1)
        throw InvalidInputError("lda_fit: components must lie in [1, classes-1]");

    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int l : labels) {
        if (l < 0) throw InvalidInputError("lda_fit: negative class label");
        ++counts[static_cast<std::size_t>(l)];
    }
    for (std::size_t k = 0; k < counts.size(); ++k)
        if (counts[k] < 2)
            throw InvalidInputError("lda_fit: class " + std::to_string(k) +
                                    " has fewer than 2 samples");

    LdaProjection proj;
    proj.global_mean = numkit::column_mean(x);
    proj.class_means.assign(static_cast<std::size_t>(num_classes), Vec(d, 0.0));
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto& mu = proj.class_means[static_cast<std::size_t>(labels[i])];
        for (std::size_t j = 0; j < d; ++j) mu[j] += x(i, j);
    }
    for (std::size_t k = 0; k < proj.class_means.size(); ++k)
        for (double& v : proj.class_means[k]) v /= static_cast<double>(counts[k]);

    Matrix sw(d, d), sb(d, d);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto& mu = proj.class_means[static_cast<std::size_t>(labels[i])];
        for (std::size_t a = 0; a < d; ++a) {
            const double da = x(i, a) - mu[a];
            for (std::size_t b = a; b < d; ++b) sw(a, b) += da * (x(i, b) - mu[b]);
        }
    }
    for (std::size_t k = 0; k < proj.class_means.size(); ++k) {
        for (std::size_t a = 0; a < d; ++a) {
            const double da = proj.class_means[k][a] - proj.global_mean[a];
            for (std::size_t b = a; b < d; ++b)
                sb(a, b) += static_cast<double>(counts[k]) * da *
                            (proj.class_means[k][b] - proj.global_mean[b]);
        }
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < a; ++b) {
            sw(a, b) = sw(b, a);
            sb(a, b) = sb(b, a);
        }

    double eps = ridge;
    if (ridge == kAutoLdaRidge) eps = 1e-8 * numkit::trace(sw) / static_cast<double>(d);
    for (std::size_t a = 0; a < d; ++a) sw(a, a) += eps;

    // Whiten with the Cholesky factor of S_w, eigensolve, then unwhiten.
    Matrix l;
    try {
        l = numkit::cholesky(sw);
    } catch (const NotPositiveDefiniteError& e) {
        throw NumericalError(std::string("lda_fit: within-class scatter is singular: ") + e.what());
    }
    Matrix c(d, d);
    {
        Matrix y(d, d);
        for (std::size_t j = 0; j < d; ++j) {
            Vec col(d);
            for (std::size_t i = 0; i < d; ++i) col[i] = sb(i, j);
            Vec sol = numkit::forward_solve(l, col);
            for (std::size_t i = 0; i < d; ++i) y(i, j) = sol[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            Vec sol = numkit::forward_solve(l, y.row(i));
            for (std::size_t j = 0; j < d; ++j) c(i, j) = sol[j];
        }
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i + 1; j < d; ++j) c(i, j) = c(j, i) = 0.5 * (c(i, j) + c(j, i));
    }
    auto [lambda, vecs] = numkit::sym_eigensolve(c);
    (void)lambda;

    proj.component_count = components;
    proj.w = Matrix(d, static_cast<std::size_t>(components));
    for (int j = 0; j < components; ++j) {
        Vec col(d);
        for (std::size_t i = 0; i < d; ++i) col[i] = vecs(i, static_cast<std::size_t>(j));
        Vec unwhitened = numkit::backward_solve_transposed(l, col);
        const double nrm = numkit::norm2(unwhitened);
        if (!(nrm > 0.0)) throw NumericalError("lda_fit: degenerate discriminant direction");
        for (std::size_t i = 0; i < d; ++i) proj.w(i, static_cast<std::size_t>(j)) = unwhitened[i] / nrm;
    }
    return proj;
}

/// Project centered rows of x onto the requested 1-based components.
inline Matrix lda_project(const LdaProjection& proj, const Matrix& x,
                          const std::vector<int>& component_indices) {
    if (x.cols != proj.w.rows) throw InvalidInputError("lda_project: dimension mismatch");
    for (int c : component_indices)
        if (c < 1 || c > proj.component_count)
            throw LookupError("lda_project: component index " + std::to_string(c) +
                              " outside 1.." + std::to_string(proj.component_count));
    Matrix out(x.rows, component_indices.size());
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t jc = 0; jc < component_indices.size(); ++jc) {
            const std::size_t j = static_cast<std::size_t>(component_indices[jc]) - 1;
            double acc = 0.0;
            for (std::size_t a = 0; a < x.cols; ++a)
                acc += (x(i, a) - proj.global_mean[a]) * proj.w(a, j);
            out(i, jc) = acc;
        }
    }
    return out;
}

}  // namespace shifcon::geometry
