#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "shifcon/common.hpp"
#include "shifcon/eig.hpp"
#include "shifcon/matrix.hpp"
#include "shifcon/repstore.hpp"
#include "shifcon/svd.hpp"

namespace shifcon::geometry {

using numkit::Matrix;
using numkit::Vec;

/// Pass as `ridge` to have subspace_distance pick its own regularizer.
constexpr double kAutoRidge = -1.0;

// ---------------------------------------------------------------------------
// Language vectors
// ---------------------------------------------------------------------------

/// Per-language, per-layer mean of pooled sentence vectors. Layer indices
/// are 1-based.
struct LanguageVectorTable {
    std::vector<std::string> languages;
    int num_layers = 0;
    int dim = 0;
    std::map<std::string, std::vector<Vec>> vectors;  // language -> [layer-1] -> R^d

    const Vec& at(const std::string& language, int layer) const {
        auto it = vectors.find(language);
        if (it == vectors.end())
            throw LookupError("vector table has no language '" + language + "'");
        if (layer < 1 || layer > num_layers)
            throw LookupError("vector table has no layer " + std::to_string(layer));
        return it->second[static_cast<std::size_t>(layer) - 1];
    }

    Vec& at_mutable(const std::string& language, int layer) {
        return const_cast<Vec&>(static_cast<const LanguageVectorTable*>(this)->at(language, layer));
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& lang : languages) {
            h = fnv1a64(lang.data(), lang.size(), h);
            for (const auto& v : vectors.at(lang)) h = fnv1a64(v, h);
        }
        return h;
    }

    std::uint64_t checksum(const std::string& language) const {
        std::uint64_t h = fnv1a64(language.data(), language.size());
        for (const auto& v : vectors.at(language)) h = fnv1a64(v, h);
        return h;
    }
};

/// v[l][i] = mean over sentences of the pooled layer-i representation.
inline LanguageVectorTable compute_language_vectors(const repstore::ActivationDump& dump,
                                                    repstore::PoolingMethod method) {
    dump.validate();
    LanguageVectorTable table;
    table.languages = dump.languages;
    table.num_layers = dump.num_layers;
    table.dim = dump.hidden_dim;
    for (const auto& lang : dump.languages) {
        if (dump.num_sentences(lang) == 0)
            throw InvalidInputError("compute_language_vectors: no sentences for '" + lang + "'");
        std::vector<Vec> per_layer;
        per_layer.reserve(static_cast<std::size_t>(dump.num_layers));
        for (int layer = 1; layer <= dump.num_layers; ++layer) {
            Matrix sv = repstore::sentence_vectors(dump, lang, layer, method);
            per_layer.push_back(numkit::column_mean(sv));
        }
        table.vectors[lang] = std::move(per_layer);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Language subspaces and the distance metric
// ---------------------------------------------------------------------------

/// Affine subspace of one language at one layer: mean, top-k right singular
/// directions covering >= variance_threshold of the total variance, and the
/// SPD surrogate K = V diag(sigma^2) V^T / (n-1).
struct LanguageSubspace {
    Vec mean;
    Matrix basis;                         // d x k, orthonormal columns
    std::vector<double> singular_values;  // length k, descending
    std::size_t retained_rank = 0;
    Matrix spd_surrogate;                 // d x d, PSD of rank k
    std::size_t sample_count = 0;
    double variance_threshold = 0.0;
};

inline LanguageSubspace fit_subspace(const Matrix& x, double variance_threshold) {
    if (x.rows < 2) throw InvalidInputError("fit_subspace: need at least 2 samples");
    if (!(variance_threshold > 0.0) || variance_threshold > 1.0)
        throw InvalidInputError("fit_subspace: variance threshold must be in (0, 1]");
    if (!x.all_finite()) throw InvalidInputError("fit_subspace: non-finite input");

    const std::size_t n = x.rows, d = x.cols;
    LanguageSubspace s;
    s.mean = numkit::column_mean(x);
    s.sample_count = n;
    s.variance_threshold = variance_threshold;

    Matrix centered = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) -= s.mean[j];

    numkit::SvdResult dec = numkit::svd(centered);
    double total = 0.0;
    for (double sv : dec.singular_values) total += sv * sv;
    if (total <= 0.0)
        throw DegenerateSubspaceError("fit_subspace: zero variance, subspace rank is 0");

    std::size_t k = 0;
    double cum = 0.0;
    for (std::size_t i = 0; i < dec.singular_values.size(); ++i) {
        cum += dec.singular_values[i] * dec.singular_values[i];
        // small slack so an exact threshold hit is not missed to roundoff
        if (cum / total >= variance_threshold - 1e-12) {
            k = i + 1;
            break;
        }
    }
    if (k == 0) k = dec.singular_values.size();

    s.retained_rank = k;
    s.singular_values.assign(dec.singular_values.begin(),
                             dec.singular_values.begin() + static_cast<std::ptrdiff_t>(k));
    s.basis = Matrix(d, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < d; ++i) s.basis(i, j) = dec.vt(j, i);

    // K = V diag(sigma^2) V^T / (n-1)
    s.spd_surrogate = Matrix(d, d);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j)
                acc += s.basis(a, j) * s.basis(b, j) * s.singular_values[j] * s.singular_values[j];
            acc /= static_cast<double>(n - 1);
            s.spd_surrogate(a, b) = acc;
            s.spd_surrogate(b, a) = acc;
        }
    return s;
}

/// Riemannian SPD distance plus mean offset:
/// sqrt(sum_i log^2 lambda_i) + ||mu_a - mu_b||_2, where lambda_i are the
/// eigenvalues of (K_a + ridge I)^{-1} (K_b + ridge I). With kAutoRidge the
/// ridge is 1e-6 * mean(trace(K_a), trace(K_b)) / d, identical on both sides
/// so that the identity Dist(A, A) = 0 and symmetry survive regularization.
inline double subspace_distance(const LanguageSubspace& a, const LanguageSubspace& b,
                                double ridge = kAutoRidge) {
    const std::size_t d = a.mean.size();
    if (b.mean.size() != d || a.spd_surrogate.rows != d || b.spd_surrogate.rows != d)
        throw InvalidInputError("subspace_distance: dimension mismatch");
    double eps = ridge;
    if (ridge == kAutoRidge) {
        eps = 1e-6 * 0.5 * (numkit::trace(a.spd_surrogate) + numkit::trace(b.spd_surrogate)) /
              static_cast<double>(d);
    } else if (ridge < 0.0) {
        throw InvalidInputError("subspace_distance: ridge must be >= 0");
    }

    Matrix ka = a.spd_surrogate;
    Matrix kb = b.spd_surrogate;
    for (std::size_t i = 0; i < d; ++i) {
        ka(i, i) += eps;
        kb(i, i) += eps;
    }
    const std::vector<double> lambda = numkit::spd_pencil_eigenvalues(ka, kb);
    double sum_log_sq = 0.0;
    for (double l : lambda) {
        const double lg = std::log(l);
        sum_log_sq += lg * lg;
    }
    double mean_term = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }
    return std::sqrt(sum_log_sq) + std::sqrt(mean_term);
}

// ---------------------------------------------------------------------------
// Distance profiles and layer-area selection
// ---------------------------------------------------------------------------

struct DistanceProfile {
    std::vector<double> layer_distances;  // index 0 = layer 1
    std::pair<std::string, std::string> language_pair;  // (non-dominant, dominant)
    double variance_threshold = 0.0;
    std::vector<double> ridges_used;      // effective ridge per layer
    std::vector<std::size_t> sample_counts;  // tokens per layer (non-dominant side)

    int num_layers() const { return static_cast<int>(layer_distances.size()); }
};

/// Per-layer distance between the dominant-like subspace (non-dominant
/// representations already shifted) and the dominant subspace. The caller
/// supplies one matrix per layer for each side, layer 1 first.
inline DistanceProfile distance_profile(const std::vector<Matrix>& dominant_like_by_layer,
                                        const std::vector<Matrix>& dominant_by_layer,
                                        double variance_threshold, double ridge = kAutoRidge,
                                        const std::string& nondominant_id = "",
                                        const std::string& dominant_id = "") {
    if (dominant_like_by_layer.size() != dominant_by_layer.size())
        throw InvalidInputError("distance_profile: layer counts disagree");
    if (dominant_like_by_layer.empty())
        throw InvalidInputError("distance_profile: no layers");
    DistanceProfile profile;
    profile.language_pair = {nondominant_id, dominant_id};
    profile.variance_threshold = variance_threshold;
    for (std::size_t i = 0; i < dominant_like_by_layer.size(); ++i) {
        try {
            LanguageSubspace sa = fit_subspace(dominant_like_by_layer[i], variance_threshold);
            LanguageSubspace sb = fit_subspace(dominant_by_layer[i], variance_threshold);
            double eps = ridge;
            if (ridge == kAutoRidge)
                eps = 1e-6 * 0.5 *
                      (numkit::trace(sa.spd_surrogate) + numkit::trace(sb.spd_surrogate)) /
                      static_cast<double>(sa.mean.size());
            profile.layer_distances.push_back(subspace_distance(sa, sb, eps));
            profile.ridges_used.push_back(eps);
            profile.sample_counts.push_back(sa.sample_count);
        } catch (const Error& e) {
            throw NumericalError("distance_profile: layer " + std::to_string(i + 1) + ": " +
                                 e.what());
        }
    }
    return profile;
}

/// Mean of several profiles (used to aggregate language pairs before layer
/// selection).
inline DistanceProfile mean_profile(const std::vector<DistanceProfile>& profiles) {
    if (profiles.empty()) throw InvalidInputError("mean_profile: no profiles");
    DistanceProfile out = profiles.front();
    out.language_pair = {"*", profiles.front().language_pair.second};
    for (std::size_t p = 1; p < profiles.size(); ++p) {
        if (profiles[p].layer_distances.size() != out.layer_distances.size())
            throw InvalidInputError("mean_profile: layer counts disagree");
        for (std::size_t i = 0; i < out.layer_distances.size(); ++i)
            out.layer_distances[i] += profiles[p].layer_distances[i];
    }
    for (double& d : out.layer_distances) d /= static_cast<double>(profiles.size());
    return out;
}

/// ceil(num_layers * beta), guarded against the product landing a hair above
/// an integer in floating point.
inline int selected_layer_count(int num_layers, double beta) {
    return static_cast<int>(std::ceil(static_cast<double>(num_layers) * beta - 1e-9));
}

/// The shift layer area: L_to < L_bk, both 1-based, |selected_layers| =
/// ceil(L * beta).
struct ShiftArea {
    int l_to = 0;
    int l_bk = 0;
    double beta = 0.0;
    std::vector<int> selected_layers;  // ascending
    bool contiguous = true;

    void validate(int num_layers) const {
        if (!(1 <= l_to && l_to < l_bk && l_bk <= num_layers))
            throw InvalidInputError("shift area violates 1 <= L_to < L_bk <= L");
    }

    nlohmann::json to_json() const {
        return {{"L_to", l_to},
                {"L_bk", l_bk},
                {"beta", beta},
                {"selected_layers", selected_layers},
                {"contiguous", contiguous}};
    }

    static ShiftArea from_json(const nlohmann::json& j) {
        ShiftArea a;
        a.l_to = j.at("L_to").get<int>();
        a.l_bk = j.at("L_bk").get<int>();
        a.beta = j.value("beta", 0.0);
        a.selected_layers = j.value("selected_layers", std::vector<int>{});
        a.contiguous = j.value("contiguous", true);
        if (a.selected_layers.empty())
            for (int l = a.l_to; l <= a.l_bk; ++l) a.selected_layers.push_back(l);
        return a;
    }
};

/// Pick the ceil(L*beta) lowest-distance layers (ties broken toward lower
/// layer index). If that set is not contiguous, fall back to the contiguous
/// window of the same width with the smallest distance sum and report
/// contiguous = false.
inline ShiftArea select_shift_area(const DistanceProfile& profile, double beta) {
    const int num_layers = profile.num_layers();
    if (!(beta > 0.0) || beta > 1.0)
        throw ConfigError("select_shift_area: beta must be in (0, 1]");
    if (num_layers < 2)
        throw InvalidInputError("select_shift_area: need at least 2 layers");
    const int k = selected_layer_count(num_layers, beta);
    if (k < 2)
        throw AreaTooSmallError("select_shift_area: ceil(L*beta) = " + std::to_string(k) +
                                " < 2, no valid L_to < L_bk exists");

    std::vector<int> order(static_cast<std::size_t>(num_layers));
    std::iota(order.begin(), order.end(), 1);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return profile.layer_distances[static_cast<std::size_t>(a) - 1] <
               profile.layer_distances[static_cast<std::size_t>(b) - 1];
    });

    std::vector<int> chosen(order.begin(), order.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    const bool contiguous = chosen.back() - chosen.front() + 1 == k;

    ShiftArea area;
    area.beta = beta;
    if (contiguous) {
        area.contiguous = true;
        area.selected_layers = chosen;
    } else {
        // smallest-sum window of width k, ties toward the left
        double best_sum = std::numeric_limits<double>::infinity();
        int best_start = 1;
        for (int start = 1; start + k - 1 <= num_layers; ++start) {
            double sum = 0.0;
            for (int l = start; l < start + k; ++l)
                sum += profile.layer_distances[static_cast<std::size_t>(l) - 1];
            if (sum < best_sum) {
                best_sum = sum;
                best_start = start;
            }
        }
        area.contiguous = false;
        area.selected_layers.clear();
        for (int l = best_start; l < best_start + k; ++l) area.selected_layers.push_back(l);
    }
    area.l_to = area.selected_layers.front();
    area.l_bk = area.selected_layers.back();
    area.validate(num_layers);
    return area;
}

// ---------------------------------------------------------------------------
// Online language-vector estimation
// ---------------------------------------------------------------------------

/// Exponentially weighted running mean of per-batch language representations.
struct OnlineVectorEstimator {
    Vec value;
    std::size_t step = 0;
    double w_new = 0.25;
    double w_old = 0.75;

    OnlineVectorEstimator() = default;
    OnlineVectorEstimator(Vec initial, double new_weight = 0.25)
        : value(std::move(initial)), w_new(new_weight), w_old(1.0 - new_weight) {
        if (!(w_new > 0.0) || !(w_new < 1.0))
            throw InvalidInputError("online estimator: w_new must lie in (0, 1)");
    }
};

inline OnlineVectorEstimator online_update(const OnlineVectorEstimator& est,
                                           std::span<const double> u) {
    if (u.size() != est.value.size())
        throw InvalidInputError("online_update: dimension mismatch");
    OnlineVectorEstimator next = est;
    for (std::size_t i = 0; i < u.size(); ++i)
        next.value[i] = est.w_new * u[i] + est.w_old * est.value[i];
    next.step = est.step + 1;
    return next;
}

}  // namespace shifcon::geometry
