#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "shifcon/corpus.hpp"
#include "shifcon/training.hpp"
#include "test_util.hpp"

using namespace shifcon;
using namespace shifcon::training;
using numkit::Matrix;
using numkit::Vec;

namespace {

struct Fixture {
    toymodel::ParallelCorpus corpus;
    toymodel::ToyModelParams params;
    ShiftPlan plan;
    MclConfig mcl_cfg;

    static Fixture make(std::uint64_t seed = 21, int layers = 3, int dim = 8) {
        toymodel::SyntheticCorpusSpec spec;
        spec.num_languages = 2;
        spec.num_concepts = 6;
        spec.data_shares = {0.6, 0.4};
        spec.min_sentence_len = 3;
        spec.max_sentence_len = 5;
        spec.train_sentences = 30;
        spec.calibration_sentences = 8;
        spec.test_sentences = 6;

        Fixture f{toymodel::make_parallel_corpus(spec), {}, {}, {}};
        toymodel::ModelConfig cfg;
        cfg.num_layers = layers;
        cfg.hidden_dim = dim;
        cfg.num_heads = 2;
        cfg.vocab_size = f.corpus.scheme.vocab_size();
        cfg.max_seq_len = 16;
        f.params = toymodel::init_params(cfg, seed);

        geometry::LanguageVectorTable table;
        table.languages = {"L0", "L1"};
        table.num_layers = layers;
        table.dim = dim;
        Rng rng(seed + 1);
        for (const auto& lang : table.languages) {
            std::vector<Vec> per_layer;
            for (int i = 0; i < layers; ++i)
                per_layer.push_back(testutil::random_vec(rng, static_cast<std::size_t>(dim), 0.3));
            table.vectors[lang] = per_layer;
        }
        geometry::ShiftArea area;
        area.l_to = 1;
        area.l_bk = layers;
        area.beta = 0.5;
        for (int l = 1; l <= layers; ++l) area.selected_layers.push_back(l);
        f.plan = ShiftPlan("L0", area, table);

        f.mcl_cfg.temperature = 0.05;
        f.mcl_cfg.pooling = repstore::PoolingMethod::Mean;
        for (int t = area.l_to; t < area.l_bk; ++t) f.mcl_cfg.layers.push_back(t);
        return f;
    }

    MsftBatch msft_batch(int n) const {
        MsftBatch batch;
        for (int i = 0; i < n; ++i) {
            const auto& [id, lang] = corpus.train_entries[static_cast<std::size_t>(i)];
            batch.sentences.push_back(corpus.render(id, lang));
            batch.languages.push_back(corpus.scheme.language_name(lang));
        }
        return batch;
    }

    TranslationPairBatch pair_batch(int n) const {
        TranslationPairBatch batch;
        for (int i = 0; i < n; ++i) {
            const int id = corpus.calibration_ids[static_cast<std::size_t>(i)];
            batch.pairs.push_back({corpus.render(id, 1), corpus.render(id, 0)});
            batch.languages.push_back("L1");
        }
        return batch;
    }
};

}  // namespace

TEST_CASE("uniform logits give ln V and a forced head gives near-zero loss", "[training]") {
    auto f = Fixture::make();
    // zero head: logits identically zero, softmax uniform
    for (double& v : f.params.w_head.data) v = 0.0;
    std::fill(f.params.b_head.begin(), f.params.b_head.end(), 0.0);
    MsftBatch batch = f.msft_batch(3);
    const double loss = msft_loss(f.params, batch, nullptr, nullptr);
    CHECK(loss == Catch::Approx(std::log(f.params.config.vocab_size)).margin(1e-12));

    // single-position batch with the head forced onto the correct target
    const int target = f.corpus.scheme.encode(0, 2);
    MsftBatch forced;
    forced.sentences = {{toymodel::TokenScheme::kBos, target}};
    forced.languages = {"L0"};
    f.params.b_head[static_cast<std::size_t>(target)] = 50.0;
    CHECK(msft_loss(f.params, forced, nullptr, nullptr) < 1e-6);
}

TEST_CASE("msft_loss rejects empty and malformed batches", "[training]") {
    auto f = Fixture::make();
    MsftBatch empty;
    CHECK_THROWS_AS(msft_loss(f.params, empty, nullptr, nullptr), InvalidInputError);
    MsftBatch bad;
    bad.sentences = {{1, 4, 5}};
    CHECK_THROWS_AS(msft_loss(f.params, bad, nullptr, nullptr), InvalidInputError);
}

TEST_CASE("msft gradients pass central finite differences", "[training]") {
    auto f = Fixture::make();
    MsftBatch batch = f.msft_batch(3);
    auto loss_fn = [&](const toymodel::ToyModelParams& p, toymodel::ToyModelParams* g) {
        return msft_loss(p, batch, nullptr, g);
    };
    auto report = check_gradient(loss_fn, f.params, 1e-5, 220, 1);
    INFO("max relative error " << report.max_rel_error << " at " << report.worst_tensor);
    CHECK(report.pass);
}

TEST_CASE("msft gradients with shift hooks pass finite differences", "[training]") {
    auto f = Fixture::make(23);
    MsftBatch batch = f.msft_batch(3);
    auto loss_fn = [&](const toymodel::ToyModelParams& p, toymodel::ToyModelParams* g) {
        return msft_loss(p, batch, &f.plan, g);
    };
    auto report = check_gradient(loss_fn, f.params, 1e-5, 220, 2);
    INFO("max relative error " << report.max_rel_error << " at " << report.worst_tensor);
    CHECK(report.pass);
}

TEST_CASE("mcl single-pair loss is exactly zero", "[training]") {
    auto f = Fixture::make();
    auto batch = f.pair_batch(1);
    const double loss =
        mcl_loss_layer(f.params, batch, 1, f.mcl_cfg, f.plan, f.corpus.scheme, nullptr);
    CHECK(loss == 0.0);
}

TEST_CASE("mcl hand value: two orthogonal pairs at tau 1", "[training]") {
    std::vector<Vec> e_l = {{1.0, 0.0}, {0.0, 1.0}};
    std::vector<Vec> e_d = {{1.0, 0.0}, {0.0, 1.0}};
    const double loss = mcl_infonce_from_embeddings(e_l, e_d, 1.0);
    CHECK(loss == Catch::Approx(2.0 * std::log(1.0 + std::exp(-1.0))).margin(1e-9));
}

TEST_CASE("mcl aligned pair with orthogonal negative at tau 0.05 is near zero", "[training]") {
    std::vector<Vec> e_l = {{1.0, 0.0}, {0.0, 1.0}};
    std::vector<Vec> e_d = {{1.0, 0.0}, {0.0, 1.0}};
    const double loss = mcl_infonce_from_embeddings(e_l, e_d, 0.05);
    // bound per term: -ln(e^20 / (e^20 + 1))
    CHECK(loss / 2.0 <= std::log1p(std::exp(-20.0)) + 1e-12);
    CHECK(loss / 2.0 <= 1e-8);
}

TEST_CASE("mcl matches an explicit softmax-loop oracle through the model", "[training]") {
    auto f = Fixture::make(29);
    for (int n : {2, 4, 8}) {
        auto batch = f.pair_batch(n);
        const int layer = 2;
        const double loss =
            mcl_loss_layer(f.params, batch, layer, f.mcl_cfg, f.plan, f.corpus.scheme, nullptr);

        // oracle: pool embeddings from independent forwards, then naive loops
        std::vector<Vec> emb_l, emb_d;
        for (int i = 0; i < n; ++i) {
            auto hooks = intervention::build_hooks(f.plan, "L1");
            const auto& pair = batch.pairs[static_cast<std::size_t>(i)];
            auto trace_l = toymodel::forward_with_hooks(f.params, pair.first, hooks);
            auto trace_d = toymodel::forward_with_hooks(f.params, pair.second, {});
            auto pool_of = [&](const toymodel::ForwardTrace& tr, const std::vector<int>& toks) {
                Vec acc(static_cast<std::size_t>(f.params.config.hidden_dim), 0.0);
                std::size_t count = 0;
                const auto& states = tr.layer_state(layer);
                for (std::size_t pos = 0; pos < toks.size(); ++pos) {
                    if (f.corpus.scheme.is_special(toks[pos])) continue;
                    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += states(pos, j);
                    ++count;
                }
                for (double& v : acc) v /= static_cast<double>(count);
                return acc;
            };
            emb_l.push_back(pool_of(trace_l, pair.first));
            emb_d.push_back(pool_of(trace_d, pair.second));
        }
        auto cosine = [](const Vec& a, const Vec& b) {
            return numkit::dot(a, b) / (numkit::norm2(a) * numkit::norm2(b));
        };
        double oracle = 0.0;
        for (int i = 0; i < n; ++i) {
            double denom = 0.0;
            for (int j = 0; j < n; ++j)
                denom += std::exp(cosine(emb_l[static_cast<std::size_t>(i)],
                                         emb_d[static_cast<std::size_t>(j)]) /
                                  f.mcl_cfg.temperature);
            oracle += -std::log(std::exp(cosine(emb_l[static_cast<std::size_t>(i)],
                                                emb_d[static_cast<std::size_t>(i)]) /
                                         f.mcl_cfg.temperature) /
                                denom);
        }
        CHECK(loss == Catch::Approx(oracle).margin(1e-10));
    }
}

TEST_CASE("mcl is invariant to positive rescaling of one embedding", "[training]") {
    Rng rng(31);
    std::vector<Vec> e_l, e_d;
    for (int i = 0; i < 4; ++i) {
        e_l.push_back(testutil::random_vec(rng, 6));
        e_d.push_back(testutil::random_vec(rng, 6));
    }
    const double base = mcl_infonce_from_embeddings(e_l, e_d, 0.5);
    for (double& v : e_l[2]) v *= 7.0;
    const double scaled = mcl_infonce_from_embeddings(e_l, e_d, 0.5);
    CHECK(std::abs(base - scaled) <= 1e-12);
    CHECK(base >= 0.0);
}

TEST_CASE("mcl rejects zero-norm embeddings with the sample index", "[training]") {
    std::vector<Vec> e_l = {{1.0, 0.0}, {0.0, 0.0}};
    std::vector<Vec> e_d = {{1.0, 0.0}, {0.0, 1.0}};
    try {
        mcl_infonce_from_embeddings(e_l, e_d, 1.0);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("sample 1") != std::string::npos);
    }
}

TEST_CASE("mcl gradients pass central finite differences", "[training]") {
    auto f = Fixture::make(37);
    auto batch = f.pair_batch(3);
    auto loss_fn = [&](const toymodel::ToyModelParams& p, toymodel::ToyModelParams* g) {
        return mcl_loss_layer(p, batch, 2, f.mcl_cfg, f.plan, f.corpus.scheme, g);
    };
    auto report = check_gradient(loss_fn, f.params, 1e-5, 220, 3);
    INFO("max relative error " << report.max_rel_error << " at " << report.worst_tensor);
    CHECK(report.pass);
}

TEST_CASE("combined loss recovers msft at alpha zero and adds scaled mcl", "[training]") {
    auto f = Fixture::make(41);
    MsftBatch msft = f.msft_batch(3);
    auto pairs = f.pair_batch(2);

    const double msft_only = msft_loss(f.params, msft, &f.plan, nullptr);
    const double at_zero =
        combined_loss(f.params, msft, pairs, 0.0, f.mcl_cfg, f.plan, f.corpus.scheme);
    CHECK(at_zero == msft_only);

    std::vector<double> per_layer;
    const double alpha = 1.5;
    const double total = combined_loss(f.params, msft, pairs, alpha, f.mcl_cfg, f.plan,
                                       f.corpus.scheme, nullptr, &per_layer);
    REQUIRE(per_layer.size() == f.mcl_cfg.layers.size());
    double mcl_sum = 0.0;
    for (double v : per_layer) mcl_sum += v;
    CHECK(total == Catch::Approx(msft_only + alpha * mcl_sum).margin(1e-12));
}

TEST_CASE("combined gradient equals msft plus alpha times mcl gradients", "[training]") {
    auto f = Fixture::make(43);
    MsftBatch msft = f.msft_batch(2);
    auto pairs = f.pair_batch(2);
    const double alpha = 0.7;

    auto g_combined = toymodel::zeros_like(f.params);
    combined_loss(f.params, msft, pairs, alpha, f.mcl_cfg, f.plan, f.corpus.scheme, &g_combined);

    auto g_msft = toymodel::zeros_like(f.params);
    msft_loss(f.params, msft, &f.plan, &g_msft);
    auto g_mcl = toymodel::zeros_like(f.params);
    for (int layer : f.mcl_cfg.layers)
        mcl_loss_layer(f.params, pairs, layer, f.mcl_cfg, f.plan, f.corpus.scheme, &g_mcl);

    auto ct = g_combined.tensors();
    auto mt = g_msft.tensors();
    auto lt = g_mcl.tensors();
    for (std::size_t t = 0; t < ct.size(); ++t)
        for (std::size_t i = 0; i < ct[t].second->size(); ++i)
            CHECK((*ct[t].second)[i] ==
                  Catch::Approx((*mt[t].second)[i] + alpha * (*lt[t].second)[i]).margin(1e-12));
}

TEST_CASE("combined gradients pass central finite differences", "[training]") {
    auto f = Fixture::make(47);
    MsftBatch msft = f.msft_batch(2);
    auto pairs = f.pair_batch(2);
    auto loss_fn = [&](const toymodel::ToyModelParams& p, toymodel::ToyModelParams* g) {
        return combined_loss(p, msft, pairs, 1.0, f.mcl_cfg, f.plan, f.corpus.scheme, g);
    };
    auto report = check_gradient(loss_fn, f.params, 1e-5, 220, 4);
    INFO("max relative error " << report.max_rel_error << " at " << report.worst_tensor);
    CHECK(report.pass);
}

TEST_CASE("perturbing plan vectors moves the loss but not the gradient structure", "[training]") {
    auto f = Fixture::make(53);
    MsftBatch msft = f.msft_batch(2);
    auto pairs = f.pair_batch(2);
    const double base =
        combined_loss(f.params, msft, pairs, 1.0, f.mcl_cfg, f.plan, f.corpus.scheme);

    auto perturbed_plan = f.plan;
    for (double& v : perturbed_plan.vector_table.at_mutable("L1", perturbed_plan.area.l_to))
        v += 0.25;
    const double moved =
        combined_loss(f.params, msft, pairs, 1.0, f.mcl_cfg, perturbed_plan, f.corpus.scheme);
    CHECK(base != moved);

    // gradients exist only for model parameters, never for the vectors
    auto grads = toymodel::zeros_like(f.params);
    combined_loss(f.params, msft, pairs, 1.0, f.mcl_cfg, perturbed_plan, f.corpus.scheme, &grads);
    CHECK(grads.num_parameters() == f.params.num_parameters());
}

TEST_CASE("check_gradient on a quadratic and a corrupted gradient", "[training]") {
    std::vector<double> x = {1.0, -2.0, 0.5, 3.0};
    std::vector<double> coeff = {2.0, 1.0, -1.5, 0.7};
    auto f = [&](const std::vector<double>& v) {
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) s += coeff[i] * v[i] * v[i] + 0.3 * v[i];
        return s;
    };
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) grad[i] = 2.0 * coeff[i] * x[i] + 0.3;
    auto report = check_gradient_flat(f, x, grad, 1e-9, 200, 5);
    CHECK(report.pass);
    CHECK(report.max_rel_error <= 1e-9);

    for (double& g : grad) g += 1.0;  // corrupt every coordinate
    auto bad = check_gradient_flat(f, x, grad, 1e-5, 200, 6);
    CHECK_FALSE(bad.pass);
}

TEST_CASE("sgd with zero learning rate is a bitwise no-op", "[training]") {
    auto f = Fixture::make(59);
    auto grads = toymodel::zeros_like(f.params);
    MsftBatch batch = f.msft_batch(2);
    msft_loss(f.params, batch, nullptr, &grads);
    const auto before = f.params.checksum();
    sgd_step(f.params, grads, 0.0);
    CHECK(f.params.checksum() == before);

    auto velocity = toymodel::zeros_like(f.params);
    sgd_step(f.params, grads, 0.0, 0.9, &velocity);
    CHECK(f.params.checksum() == before);

    // a real step moves the parameters
    sgd_step(f.params, grads, 0.1);
    CHECK(f.params.checksum() != before);
}
