#include <catch_amalgamated.hpp>

#include <cmath>

#include "shifcon/geometry.hpp"
#include "shifcon/lda.hpp"
#include "test_util.hpp"

using namespace shifcon;
using namespace shifcon::geometry;
using numkit::Matrix;
using numkit::Vec;
using testutil::random_matrix;
using testutil::random_spd;

namespace {

LanguageSubspace subspace_with(Matrix k, Vec mean) {
    LanguageSubspace s;
    s.spd_surrogate = std::move(k);
    s.mean = std::move(mean);
    s.retained_rank = s.spd_surrogate.rows;
    s.sample_count = 2;
    return s;
}

repstore::ActivationDump dump_from_layer_matrices(
    const std::vector<std::string>& langs,
    const std::map<std::string, std::vector<Matrix>>& layers,
    const std::map<std::string, std::vector<std::uint64_t>>& offsets) {
    repstore::ActivationDump dump;
    dump.model_id = "geom-test";
    dump.languages = langs;
    dump.num_layers = static_cast<int>(layers.begin()->second.size());
    dump.hidden_dim = static_cast<int>(layers.begin()->second.front().cols);
    for (const auto& lang : langs) {
        repstore::ActivationDump::LanguageActivations acts;
        acts.layers = layers.at(lang);
        acts.sentence_offsets = offsets.at(lang);
        dump.per_language[lang] = std::move(acts);
    }
    dump.validate();
    return dump;
}

}  // namespace

TEST_CASE("language vectors from tiny dumps", "[geometry]") {
    // one sentence per language: vector equals that sentence's pooled vector
    Matrix tokens{{1.0, 2.0}, {3.0, 4.0}};
    auto dump = dump_from_layer_matrices({"a"}, {{"a", {tokens}}}, {{"a", {2}}});
    auto table = compute_language_vectors(dump, repstore::PoolingMethod::Mean);
    CHECK(table.at("a", 1) == Vec{2.0, 3.0});

    // two sentences pooling to (0,0) and (2,2) average to (1,1)
    Matrix two{{0.0, 0.0}, {2.0, 2.0}};
    auto dump2 = dump_from_layer_matrices({"a"}, {{"a", {two}}}, {{"a", {1, 2}}});
    auto table2 = compute_language_vectors(dump2, repstore::PoolingMethod::Mean);
    CHECK(table2.at("a", 1) == Vec{1.0, 1.0});
}

TEST_CASE("language vectors match an explicit loop oracle", "[geometry]") {
    Rng rng(101);
    const std::size_t sentences = 256, len = 3, d = 8;
    std::vector<std::uint64_t> offsets;
    for (std::size_t s = 1; s <= sentences; ++s) offsets.push_back(s * len);
    Matrix tokens = random_matrix(rng, sentences * len, d);
    auto dump = dump_from_layer_matrices({"a"}, {{"a", {tokens}}}, {{"a", offsets}});
    auto table = compute_language_vectors(dump, repstore::PoolingMethod::Mean);

    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t s = 0; s < sentences; ++s) {
            double sent = 0.0;
            for (std::size_t t = 0; t < len; ++t) sent += tokens(s * len + t, j);
            acc += sent / static_cast<double>(len);
        }
        CHECK(table.at("a", 1)[j] ==
              Catch::Approx(acc / static_cast<double>(sentences)).margin(1e-12));
    }
}

TEST_CASE("fit_subspace on rank-1 data", "[geometry]") {
    Matrix x{{1.0, 0.0}, {-1.0, 0.0}};
    auto s = fit_subspace(x, 0.9);
    CHECK(s.retained_rank == 1);
    CHECK(s.mean == Vec{0.0, 0.0});
    CHECK(std::abs(s.basis(0, 0)) == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(s.basis(1, 0)) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("fit_subspace takes both directions when the top one is short of the threshold",
          "[geometry]") {
    const double a = std::sqrt(0.85), b = std::sqrt(0.15);
    Matrix x{{a, 0.0}, {-a, 0.0}, {0.0, b}, {0.0, -b}};
    auto s = fit_subspace(x, 0.9);
    CHECK(s.retained_rank == 2);
}

TEST_CASE("fit_subspace rank is monotone in the variance threshold", "[geometry]") {
    Rng rng(102);
    Matrix x = random_matrix(rng, 60, 10);
    std::size_t prev = 0;
    for (double thr : {0.75, 0.90, 0.95, 0.99}) {
        auto s = fit_subspace(x, thr);
        CHECK(s.retained_rank >= prev);
        prev = s.retained_rank;

        // orthonormal basis and PSD surrogate
        Matrix g = numkit::matmul(numkit::transpose(s.basis), s.basis);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j)
                CHECK(g(i, j) == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-10));
        CHECK(numkit::asymmetry(s.spd_surrogate) < 1e-10);
        for (std::size_t i = 0; i + 1 < s.singular_values.size(); ++i)
            CHECK(s.singular_values[i] >= s.singular_values[i + 1]);

        Matrix centered = x;
        Vec mu = numkit::column_mean(x);
        for (std::size_t i = 0; i < centered.rows; ++i)
            for (std::size_t j = 0; j < centered.cols; ++j) centered(i, j) -= mu[j];
        auto full = numkit::svd(centered);
        double kept = 0.0, total = 0.0;
        for (std::size_t i = 0; i < full.singular_values.size(); ++i)
            total += full.singular_values[i] * full.singular_values[i];
        for (std::size_t i = 0; i < s.retained_rank; ++i)
            kept += full.singular_values[i] * full.singular_values[i];
        CHECK(kept / total >= thr - 1e-9);
    }
}

TEST_CASE("fit_subspace rejects degenerate input", "[geometry]") {
    CHECK_THROWS_AS(fit_subspace(Matrix{{1.0, 2.0}}, 0.9), InvalidInputError);
    Matrix constant(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) constant(i, j) = 7.0;
    CHECK_THROWS_AS(fit_subspace(constant, 0.9), DegenerateSubspaceError);
}

TEST_CASE("subspace distance hand values", "[geometry]") {
    // identical subspaces
    Rng rng(103);
    auto s = subspace_with(random_spd(rng, 3), {1.0, 2.0, 3.0});
    CHECK(subspace_distance(s, s, 0.0) <= 1e-10);
    CHECK(subspace_distance(s, s) <= 1e-10);  // auto ridge

    // K_a = I, K_b = diag(4,1): eigenvalues {4,1}, distance ln 4
    auto sa = subspace_with(Matrix::identity(2), {0.0, 0.0});
    auto sb = subspace_with(Matrix{{4.0, 0.0}, {0.0, 1.0}}, {0.0, 0.0});
    CHECK(subspace_distance(sa, sb, 0.0) == Catch::Approx(std::log(4.0)).margin(1e-9));

    // equal K, mean offset (3,4): pure Euclidean term
    auto sc = subspace_with(Matrix::identity(2), {3.0, 4.0});
    CHECK(subspace_distance(sa, sc, 0.0) == Catch::Approx(5.0).margin(1e-12));
}

TEST_CASE("subspace distance is symmetric and vanishes on identity", "[geometry]") {
    Rng rng(104);
    for (int trial = 0; trial < 25; ++trial) {
        auto a = subspace_with(random_spd(rng, 6), testutil::random_vec(rng, 6));
        auto b = subspace_with(random_spd(rng, 6), testutil::random_vec(rng, 6));
        const double ab = subspace_distance(a, b, 1e-6);
        const double ba = subspace_distance(b, a, 1e-6);
        CHECK(std::abs(ab - ba) <= 1e-8);
        CHECK(subspace_distance(a, a, 1e-6) <= 1e-10);
    }
}

TEST_CASE("subspace distance eigenvalue term is congruence invariant", "[geometry]") {
    Rng rng(105);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = subspace_with(random_spd(rng, 4), Vec(4, 0.0));
        auto b = subspace_with(random_spd(rng, 4), Vec(4, 0.0));
        Matrix m = testutil::random_invertible(rng, 4, 0.1, 10.0);
        auto am = subspace_with(
            numkit::matmul(numkit::matmul(m, a.spd_surrogate), numkit::transpose(m)), Vec(4, 0.0));
        auto bm = subspace_with(
            numkit::matmul(numkit::matmul(m, b.spd_surrogate), numkit::transpose(m)), Vec(4, 0.0));
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = i + 1; j < 4; ++j) {
                am.spd_surrogate(i, j) = am.spd_surrogate(j, i) =
                    0.5 * (am.spd_surrogate(i, j) + am.spd_surrogate(j, i));
                bm.spd_surrogate(i, j) = bm.spd_surrogate(j, i) =
                    0.5 * (bm.spd_surrogate(i, j) + bm.spd_surrogate(j, i));
            }
        const double base = subspace_distance(a, b, 0.0);
        const double cong = subspace_distance(am, bm, 0.0);
        CHECK(std::abs(base - cong) <= 1e-6 * std::max(1.0, std::abs(base)));
    }
}

TEST_CASE("rank-deficient K with zero ridge is rejected", "[geometry]") {
    Matrix x{{1.0, 0.0}, {-1.0, 0.0}, {2.0, 0.0}};
    auto s = fit_subspace(x, 0.9);  // rank 1 in d=2, K singular
    CHECK_THROWS_AS(subspace_distance(s, s, 0.0), NotPositiveDefiniteError);
    CHECK(subspace_distance(s, s) <= 1e-10);  // auto ridge handles it
}

TEST_CASE("distance profile of identical streams is zero with minimum where built identical",
          "[geometry]") {
    Rng rng(106);
    std::vector<Matrix> left, right;
    for (int layer = 0; layer < 4; ++layer) {
        Matrix m = random_matrix(rng, 50, 6);
        left.push_back(m);
        right.push_back(m);
    }
    auto profile = distance_profile(left, right, 0.9);
    for (double d : profile.layer_distances) CHECK(d <= 1e-10);

    // five layers, only layer 3 identical: argmin must be layer 3
    std::vector<Matrix> l2, r2;
    for (int layer = 0; layer < 5; ++layer) {
        Matrix a = random_matrix(rng, 60, 6);
        if (layer == 2) {
            l2.push_back(a);
            r2.push_back(a);
        } else {
            l2.push_back(a);
            Matrix b = random_matrix(rng, 60, 6);
            for (std::size_t i = 0; i < b.rows; ++i) b(i, 0) += 3.0;  // clearly separated stream
            r2.push_back(b);
        }
    }
    auto p2 = distance_profile(l2, r2, 0.9);
    const auto argmin =
        std::min_element(p2.layer_distances.begin(), p2.layer_distances.end()) -
        p2.layer_distances.begin();
    CHECK(argmin == 2);
}

TEST_CASE("select_shift_area hand-sorted example", "[geometry]") {
    DistanceProfile p;
    p.layer_distances = {5, 4, 3, 1, 1, 1, 2, 3, 9, 9};
    auto area = select_shift_area(p, 0.3);
    CHECK(area.selected_layers == std::vector<int>{4, 5, 6});
    CHECK(area.l_to == 4);
    CHECK(area.l_bk == 6);
    CHECK(area.contiguous);
}

TEST_CASE("select_shift_area picks exactly ceil(L*beta) layers", "[geometry]") {
    // L=32, beta=0.30: 10 layers, the width of a [13, 22] area
    DistanceProfile p;
    for (int l = 1; l <= 32; ++l)
        p.layer_distances.push_back(std::abs(l - 17.5));  // valley in the middle
    auto area = select_shift_area(p, 0.30);
    CHECK(area.selected_layers.size() == 10);
    CHECK(area.l_bk - area.l_to + 1 == 10);
    CHECK(area.contiguous);

    // ceiling guard: 10 * 0.3 must select 3 layers, not 4
    DistanceProfile q;
    q.layer_distances.assign(10, 1.0);
    auto a2 = select_shift_area(q, 0.3);
    CHECK(a2.selected_layers.size() == 3);
    CHECK(a2.l_to == 1);  // ties broken toward lower layers
    CHECK(a2.l_bk == 3);
}

TEST_CASE("select_shift_area falls back to the best window when non-contiguous", "[geometry]") {
    DistanceProfile p;
    p.layer_distances = {9, 0.1, 9, 9, 9, 8, 0.2, 0.3, 9, 9};
    auto area = select_shift_area(p, 0.3);
    CHECK_FALSE(area.contiguous);

    // oracle: enumerate every window of width 3
    double best = 1e300;
    int best_start = 0;
    for (int s = 0; s + 3 <= 10; ++s) {
        double sum = p.layer_distances[static_cast<std::size_t>(s)] +
                     p.layer_distances[static_cast<std::size_t>(s) + 1] +
                     p.layer_distances[static_cast<std::size_t>(s) + 2];
        if (sum < best) {
            best = sum;
            best_start = s + 1;
        }
    }
    CHECK(area.l_to == best_start);
    CHECK(area.l_bk == best_start + 2);
    CHECK(area.selected_layers == std::vector<int>{best_start, best_start + 1, best_start + 2});
}

TEST_CASE("select_shift_area rejects areas too small for a shift pair", "[geometry]") {
    DistanceProfile p;
    p.layer_distances.assign(8, 1.0);
    CHECK_THROWS_AS(select_shift_area(p, 0.1), AreaTooSmallError);
    CHECK_THROWS_AS(select_shift_area(p, 1.5), ConfigError);
}

TEST_CASE("select_shift_area bounds hold on random profiles", "[geometry]") {
    Rng rng(108);
    for (int trial = 0; trial < 30; ++trial) {
        const int layers = static_cast<int>(rng.uniform_int(4, 40));
        DistanceProfile p;
        for (int l = 0; l < layers; ++l) p.layer_distances.push_back(rng.uniform(0.0, 10.0));
        const double beta = rng.uniform(0.1, 1.0);
        const int k = selected_layer_count(layers, beta);
        if (k < 2) continue;
        auto area = select_shift_area(p, beta);
        CHECK(static_cast<int>(area.selected_layers.size()) == k);
        CHECK(area.l_to >= 1);
        CHECK(area.l_to < area.l_bk);
        CHECK(area.l_bk <= layers);
    }
}

TEST_CASE("online estimator paper weights and fixed point", "[geometry]") {
    OnlineVectorEstimator est(Vec{0.0, 0.0});
    auto next = online_update(est, Vec{1.0, 1.0});
    CHECK(next.value == Vec{0.25, 0.25});
    CHECK(next.step == 1);

    for (double u : {1.0, 0.5, -2.0}) {
        OnlineVectorEstimator fp(Vec{u});
        auto kept = online_update(fp, Vec{u});
        CHECK(kept.value[0] == u);
    }

    OnlineVectorEstimator bad(Vec{0.0, 0.0});
    CHECK_THROWS_AS(online_update(bad, Vec{1.0}), InvalidInputError);
}

TEST_CASE("online estimator follows the geometric closed form", "[geometry]") {
    OnlineVectorEstimator est(Vec{0.0});
    for (int t = 1; t <= 50; ++t) {
        est = online_update(est, Vec{1.0});
        CHECK(std::abs(est.value[0] - (1.0 - std::pow(0.75, t))) <= 1e-12);
    }
    // linear convergence with ratio w_old
    OnlineVectorEstimator e2(Vec{0.0});
    double prev_err = 1.0;
    for (int t = 1; t <= 20; ++t) {
        e2 = online_update(e2, Vec{1.0});
        const double err = std::abs(e2.value[0] - 1.0);
        CHECK(err == Catch::Approx(prev_err * 0.75).margin(1e-12));
        prev_err = err;
    }
}

TEST_CASE("lda separates axis-aligned isotropic classes", "[geometry]") {
    Rng rng(109);
    Matrix x(80, 2);
    std::vector<int> labels(80);
    for (std::size_t i = 0; i < 80; ++i) {
        const int cls = i < 40 ? 0 : 1;
        labels[i] = cls;
        x(i, 0) = (cls == 0 ? 0.0 : 4.0) + rng.normal();
        x(i, 1) = rng.normal();
    }
    auto proj = lda_fit(x, labels, 1);
    CHECK(std::abs(proj.w(0, 0)) >= 0.999);  // component 1 along e1, up to sign
}

TEST_CASE("lda two-class direction matches the closed-form Fisher oracle", "[geometry]") {
    Rng rng(110);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 5, n_per = 40;
        Matrix x(2 * n_per, d);
        std::vector<int> labels(2 * n_per);
        Vec mu0 = testutil::random_vec(rng, d, 2.0);
        Vec mu1 = testutil::random_vec(rng, d, 2.0);
        Matrix mix = testutil::random_invertible(rng, d, 0.5, 2.0);
        for (std::size_t i = 0; i < 2 * n_per; ++i) {
            const int cls = i < n_per ? 0 : 1;
            labels[i] = cls;
            Vec noise = numkit::matvec(mix, testutil::random_vec(rng, d));
            for (std::size_t j = 0; j < d; ++j)
                x(i, j) = (cls == 0 ? mu0[j] : mu1[j]) + noise[j];
        }
        auto proj = lda_fit(x, labels, 1);

        // oracle: ridge-regularized S_w solved directly against mu0 - mu1
        Matrix sw(d, d);
        std::vector<Vec> means = {Vec(d, 0.0), Vec(d, 0.0)};
        for (std::size_t i = 0; i < 2 * n_per; ++i)
            for (std::size_t j = 0; j < d; ++j)
                means[static_cast<std::size_t>(labels[i])][j] += x(i, j);
        for (auto& m : means)
            for (double& v : m) v /= static_cast<double>(n_per);
        for (std::size_t i = 0; i < 2 * n_per; ++i) {
            const auto& m = means[static_cast<std::size_t>(labels[i])];
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b)
                    sw(a, b) += (x(i, a) - m[a]) * (x(i, b) - m[b]);
        }
        const double ridge = 1e-8 * numkit::trace(sw) / static_cast<double>(d);
        for (std::size_t a = 0; a < d; ++a) sw(a, a) += ridge;
        Vec diff(d);
        for (std::size_t j = 0; j < d; ++j) diff[j] = means[0][j] - means[1][j];
        Vec fisher = numkit::cholesky_solve(numkit::cholesky(sw), diff);

        Vec col(d);
        for (std::size_t i = 0; i < d; ++i) col[i] = proj.w(i, 0);
        const double cosv = numkit::dot(fisher, col) / numkit::norm2(fisher);
        CHECK(std::abs(cosv) >= 0.999);
    }
}

TEST_CASE("lda enforces the class-count rank bound", "[geometry]") {
    Rng rng(111);
    Matrix x(30, 4);
    std::vector<int> labels(30);
    for (std::size_t i = 0; i < 30; ++i) {
        labels[i] = static_cast<int>(i % 3);
        for (std::size_t j = 0; j < 4; ++j) x(i, j) = rng.normal() + labels[i] * 2.0;
    }
    CHECK_NOTHROW(lda_fit(x, labels, 2));
    CHECK_THROWS_AS(lda_fit(x, labels, 3), InvalidInputError);

    auto proj2 = lda_fit(x, labels, 2);
    CHECK_THROWS_AS(lda_project(proj2, x, {3}), LookupError);
}

TEST_CASE("lda projection of class means exceeds within-class spread on separable data",
          "[geometry]") {
    Rng rng(112);
    Matrix x(100, 3);
    std::vector<int> labels(100);
    for (std::size_t i = 0; i < 100; ++i) {
        const int cls = i < 50 ? 0 : 1;
        labels[i] = cls;
        x(i, 0) = cls * 10.0 + 0.3 * rng.normal();
        x(i, 1) = 0.3 * rng.normal();
        x(i, 2) = 0.3 * rng.normal();
    }
    auto proj = lda_fit(x, labels, 1);
    Matrix projected = lda_project(proj, x, {1});
    double m0 = 0.0, m1 = 0.0;
    for (std::size_t i = 0; i < 50; ++i) m0 += projected(i, 0) / 50.0;
    for (std::size_t i = 50; i < 100; ++i) m1 += projected(i, 0) / 50.0;
    double spread = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        const double mu = i < 50 ? m0 : m1;
        spread += (projected(i, 0) - mu) * (projected(i, 0) - mu);
    }
    spread = std::sqrt(spread / 100.0);
    CHECK(std::abs(m0 - m1) >= spread);
}

TEST_CASE("lda identity projection returns the centered first coordinate", "[geometry]") {
    LdaProjection proj;
    proj.w = Matrix{{1.0}, {0.0}};
    proj.global_mean = {2.0, 5.0};
    proj.component_count = 1;
    Matrix x{{3.0, 9.0}, {1.0, 0.0}};
    Matrix out = lda_project(proj, x, {1});
    CHECK(out(0, 0) == 1.0);
    CHECK(out(1, 0) == -1.0);
}

TEST_CASE("lda with ridge zero on singular scatter is a numerical failure", "[geometry]") {
    Matrix x(8, 3);
    std::vector<int> labels(8);
    Rng rng(113);
    for (std::size_t i = 0; i < 8; ++i) {
        labels[i] = static_cast<int>(i % 2);
        x(i, 0) = rng.normal() + labels[i] * 3.0;
        x(i, 1) = rng.normal();
        x(i, 2) = 0.0;  // no variance: S_w singular
    }
    CHECK_THROWS_AS(lda_fit(x, labels, 1, 0.0), NumericalError);
    CHECK_NOTHROW(lda_fit(x, labels, 1));
}
