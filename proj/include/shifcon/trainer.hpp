#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shifcon/corpus.hpp"
#include "shifcon/dumping.hpp"
#include "shifcon/geometry.hpp"
#include "shifcon/intervention.hpp"
#include "shifcon/training.hpp"

namespace shifcon::training {

struct TrainingConfig {
    double alpha = 1.0;
    double tau = 0.05;
    double learning_rate = 0.35;
    double momentum = 0.0;
    int batch_size = 16;
    int mcl_batch_size = 8;
    int stage1_steps = 500;
    int stage2_steps = 350;
    std::uint64_t seed = 1;
    PoolingMethod pooling = PoolingMethod::Mean;
    bool mix_mcl_languages = false;

    // ablation switches; both true = the full method
    bool use_shift_hooks = true;
    bool use_mcl = true;

    // geometry knobs used between the stages
    double variance_threshold = 0.9;
    double beta = 0.3;
    double ridge = geometry::kAutoRidge;

    void validate() const {
        if (!(alpha >= 0.0)) throw ConfigError("training: alpha must be non-negative");
        if (!(tau > 0.0)) throw ConfigError("training: tau must be positive");
        if (!(learning_rate >= 0.0)) throw ConfigError("training: negative learning rate");
        if (batch_size < 1 || mcl_batch_size < 1) throw ConfigError("training: batch sizes must be positive");
        if (stage1_steps < 1) throw ConfigError("training: stage-1 needs at least one step");
        if (stage2_steps < 0) throw ConfigError("training: negative stage-2 step count");
        if (!(variance_threshold > 0.0) || variance_threshold > 1.0)
            throw ConfigError("training: variance threshold must be in (0, 1]");
        if (!(beta > 0.0) || beta > 1.0) throw ConfigError("training: beta must be in (0, 1]");
    }

    nlohmann::json to_json() const {
        return {{"alpha", alpha},
                {"tau", tau},
                {"learning_rate", learning_rate},
                {"momentum", momentum},
                {"batch_size", batch_size},
                {"mcl_batch_size", mcl_batch_size},
                {"stage1_steps", stage1_steps},
                {"stage2_steps", stage2_steps},
                {"seed", seed},
                {"pooling", repstore::pooling_name(pooling)},
                {"mix_mcl_languages", mix_mcl_languages},
                {"use_shift_hooks", use_shift_hooks},
                {"use_mcl", use_mcl},
                {"variance_threshold", variance_threshold},
                {"beta", beta},
                {"ridge", ridge}};
    }
};

struct TrainingLogEntry {
    int step = 0;
    int stage = 1;
    double msft = 0.0;
    std::vector<double> mcl_per_layer;
    double total = 0.0;
    std::string vector_checksum;

    nlohmann::json to_json() const {
        return {{"step", step},         {"stage", stage},
                {"msft", msft},         {"mcl_per_layer", mcl_per_layer},
                {"total", total},       {"vector_checksum", vector_checksum}};
    }
};

/// Language vectors, per-language-pair distance profiles, and the aggregate
/// profile for one model snapshot (all from unhooked calibration forwards;
/// the non-dominant side is shift-projected per layer before fitting).
struct GeometrySnapshot {
    repstore::ActivationDump dump;
    geometry::LanguageVectorTable vectors;
    std::vector<geometry::DistanceProfile> profiles;
    geometry::DistanceProfile aggregate;
};

inline GeometrySnapshot analyze_geometry(const toymodel::ToyModelParams& params,
                                         const toymodel::ParallelCorpus& corpus,
                                         double variance_threshold, double ridge,
                                         PoolingMethod pooling) {
    GeometrySnapshot snap;
    snap.dump = toymodel::collect_activation_dump(params, corpus, corpus.calibration_ids);
    snap.vectors = geometry::compute_language_vectors(snap.dump, pooling);

    const std::string dominant = corpus.dominant_name();
    for (const auto& lang : snap.dump.languages) {
        if (lang == dominant) continue;
        std::vector<Matrix> shifted, dom;
        for (int layer = 1; layer <= snap.dump.num_layers; ++layer) {
            shifted.push_back(intervention::shift_toward(snap.dump.layer_matrix(lang, layer),
                                                         snap.vectors.at(lang, layer),
                                                         snap.vectors.at(dominant, layer)));
            dom.push_back(snap.dump.layer_matrix(dominant, layer));
        }
        snap.profiles.push_back(
            geometry::distance_profile(shifted, dom, variance_threshold, ridge, lang, dominant));
    }
    snap.aggregate = geometry::mean_profile(snap.profiles);
    return snap;
}

namespace detail {

// Deterministic cursor over shuffled entries; reshuffles at wraparound.
template <typename T>
class BatchCursor {
public:
    BatchCursor(std::vector<T> items, std::uint64_t seed) : items_(std::move(items)), rng_(seed) {
        if (!items_.empty()) rng_.shuffle(items_);
    }

    std::vector<T> next(std::size_t n) {
        std::vector<T> out;
        if (items_.empty()) return out;
        while (out.size() < n) {
            if (cursor_ == items_.size()) {
                rng_.shuffle(items_);
                cursor_ = 0;
            }
            out.push_back(items_[cursor_++]);
        }
        return out;
    }

    bool empty() const { return items_.empty(); }

private:
    std::vector<T> items_;
    Rng rng_;
    std::size_t cursor_ = 0;
};

}  // namespace detail

/// Stage 1: autoregressive fine-tuning on the imbalanced multilingual mix,
/// no hooks, no contrastive term.
inline toymodel::ToyModelParams train_stage1(const TrainingConfig& cfg,
                                             const toymodel::ParallelCorpus& corpus,
                                             const toymodel::ModelConfig& model_cfg,
                                             std::vector<TrainingLogEntry>* log = nullptr) {
    cfg.validate();
    if (corpus.spec.num_languages < 2)
        throw ConfigError("train: corpus must contain at least two languages");

    toymodel::ToyModelParams params = toymodel::init_params(model_cfg, cfg.seed);
    toymodel::ToyModelParams velocity = toymodel::zeros_like(params);
    detail::BatchCursor<std::pair<int, int>> cursor(corpus.train_entries,
                                                    splitmix64(cfg.seed ^ 0x517a9e1ull));

    for (int step = 1; step <= cfg.stage1_steps; ++step) {
        MsftBatch batch;
        for (const auto& [id, lang] : cursor.next(static_cast<std::size_t>(cfg.batch_size))) {
            batch.sentences.push_back(corpus.render(id, lang));
            batch.languages.push_back(corpus.scheme.language_name(lang));
        }
        toymodel::ToyModelParams grads = toymodel::zeros_like(params);
        const double loss = msft_loss(params, batch, nullptr, &grads);
        sgd_step(params, grads, cfg.learning_rate, cfg.momentum,
                 cfg.momentum != 0.0 ? &velocity : nullptr);
        if (log != nullptr) log->push_back({step, 1, loss, {}, loss, ""});
    }
    if (!params.all_finite()) throw NumericalError("train: stage-1 parameters diverged");
    return params;
}

/// Stage 2: combined objective with shift hooks and per-layer MCL over the
/// selected area; the plan's language vectors at L_to and L_bk follow the
/// per-batch pooled means through the online estimator.
inline std::pair<toymodel::ToyModelParams, ShiftPlan> train_stage2(
    const TrainingConfig& cfg, const toymodel::ParallelCorpus& corpus,
    const toymodel::ToyModelParams& stage1_params, const geometry::ShiftArea& area,
    const geometry::LanguageVectorTable& stage1_vectors,
    std::vector<TrainingLogEntry>* log = nullptr) {
    cfg.validate();
    const std::string dominant = corpus.dominant_name();
    ShiftPlan plan(dominant, area, stage1_vectors, cfg.use_shift_hooks);

    MclConfig mcl_cfg;
    mcl_cfg.temperature = cfg.tau;
    mcl_cfg.pooling = cfg.pooling;
    for (int t = area.l_to; t < area.l_bk; ++t) mcl_cfg.layers.push_back(t);

    toymodel::ToyModelParams params = stage1_params;
    toymodel::ToyModelParams velocity = toymodel::zeros_like(params);

    detail::BatchCursor<std::pair<int, int>> msft_cursor(corpus.train_entries,
                                                         splitmix64(cfg.seed ^ 0x57a6e2ull));
    // per-language pair pools: every non-dominant train entry pairs with the
    // dominant rendering of the same sentence
    std::vector<std::string> mcl_languages;
    std::map<std::string, detail::BatchCursor<int>> pair_cursors;
    std::map<int, int> id_to_lang;
    {
        std::map<std::string, std::vector<int>> ids_by_lang;
        std::vector<int> all_ids;
        for (const auto& [id, lang] : corpus.train_entries) {
            if (lang == corpus.spec.dominant_language) continue;
            ids_by_lang[corpus.scheme.language_name(lang)].push_back(id);
            all_ids.push_back(id);
            id_to_lang[id] = lang;
        }
        if (cfg.mix_mcl_languages) {
            for (const auto& [lang, ids] : ids_by_lang) mcl_languages.push_back(lang);
            pair_cursors.emplace("*", detail::BatchCursor<int>(
                                          all_ids, splitmix64(cfg.seed ^ 0x9a1bull)));
        } else {
            std::uint64_t salt = 0;
            for (const auto& [lang, ids] : ids_by_lang) {
                mcl_languages.push_back(lang);
                pair_cursors.emplace(
                    lang, detail::BatchCursor<int>(ids, splitmix64(cfg.seed ^ (0xb0b0ull + salt))));
                ++salt;
            }
        }
    }

    // online estimators for the two hooked layers of every language
    std::map<std::pair<std::string, int>, geometry::OnlineVectorEstimator> estimators;
    for (const auto& lang : plan.vector_table.languages)
        for (int layer : {area.l_to, area.l_bk})
            estimators.emplace(std::make_pair(lang, layer),
                               geometry::OnlineVectorEstimator(plan.vector_table.at(lang, layer)));

    std::size_t mcl_lang_cursor = 0;
    for (int step = 1; step <= cfg.stage2_steps; ++step) {
        MsftBatch msft_batch;
        for (const auto& [id, lang] : msft_cursor.next(static_cast<std::size_t>(cfg.batch_size))) {
            msft_batch.sentences.push_back(corpus.render(id, lang));
            msft_batch.languages.push_back(corpus.scheme.language_name(lang));
        }

        TranslationPairBatch mcl_batch;
        if (cfg.use_mcl && !mcl_languages.empty()) {
            if (cfg.mix_mcl_languages) {
                for (int id : pair_cursors.at("*").next(static_cast<std::size_t>(cfg.mcl_batch_size))) {
                    const int lang_idx = id_to_lang.at(id);
                    mcl_batch.pairs.push_back(
                        {corpus.render(id, lang_idx),
                         corpus.render(id, corpus.spec.dominant_language)});
                    mcl_batch.languages.push_back(corpus.scheme.language_name(lang_idx));
                }
            } else {
                const std::string lang = mcl_languages[mcl_lang_cursor % mcl_languages.size()];
                ++mcl_lang_cursor;
                int lang_idx = -1;
                for (int l = 0; l < corpus.spec.num_languages; ++l)
                    if (corpus.scheme.language_name(l) == lang) lang_idx = l;
                for (int id : pair_cursors.at(lang).next(static_cast<std::size_t>(cfg.mcl_batch_size))) {
                    mcl_batch.pairs.push_back(
                        {corpus.render(id, lang_idx),
                         corpus.render(id, corpus.spec.dominant_language)});
                    mcl_batch.languages.push_back(lang);
                }
            }
        }

        // per-batch pooled means for the online vector update
        std::map<std::pair<std::string, int>, std::pair<Vec, std::size_t>> sums;
        VectorUpdateSink sink = [&](const std::string& lang, int layer, const Vec& pooled) {
            auto& [sum, count] = sums[{lang, layer}];
            if (sum.empty()) sum.assign(pooled.size(), 0.0);
            for (std::size_t j = 0; j < pooled.size(); ++j) sum[j] += pooled[j];
            ++count;
        };

        toymodel::ToyModelParams grads = toymodel::zeros_like(params);
        std::vector<double> per_layer;
        const double alpha = cfg.use_mcl ? cfg.alpha : 0.0;
        const double total = combined_loss(params, msft_batch, mcl_batch, alpha, mcl_cfg, plan,
                                           corpus.scheme, &grads, &per_layer, sink);
        double msft_part = total;
        for (double v : per_layer) msft_part -= alpha * v;
        sgd_step(params, grads, cfg.learning_rate, cfg.momentum,
                 cfg.momentum != 0.0 ? &velocity : nullptr);

        for (auto& [key, acc] : sums) {
            auto est_it = estimators.find(key);
            if (est_it == estimators.end()) continue;
            Vec u = acc.first;
            for (double& v : u) v /= static_cast<double>(acc.second);
            est_it->second = geometry::online_update(est_it->second, u);
            plan.vector_table.at_mutable(key.first, key.second) = est_it->second.value;
        }

        if (log != nullptr)
            log->push_back({step, 2, msft_part, per_layer, total,
                            to_hex(plan.vector_table.checksum())});
    }
    if (!params.all_finite()) throw NumericalError("train: stage-2 parameters diverged");
    return {std::move(params), std::move(plan)};
}

struct TrainResult {
    toymodel::ToyModelParams stage1;
    toymodel::ToyModelParams params;
    GeometrySnapshot stage1_geometry;
    geometry::ShiftArea area;
    ShiftPlan plan;
    std::vector<TrainingLogEntry> log;
};

/// The full two-stage recipe: MSFT-only stage 1, geometry analysis and layer
/// selection on the stage-1 model, then the combined objective with hooks.
/// An explicit `area_override` (from --layers) skips the selection rule. The
/// shift area is frozen after selection; stage 2 never recomputes it.
inline TrainResult train_two_stage(const TrainingConfig& cfg,
                                   const toymodel::ParallelCorpus& corpus,
                                   const toymodel::ModelConfig& model_cfg,
                                   const geometry::ShiftArea* area_override = nullptr) {
    TrainResult result;
    result.stage1 = train_stage1(cfg, corpus, model_cfg, &result.log);
    result.stage1_geometry =
        analyze_geometry(result.stage1, corpus, cfg.variance_threshold, cfg.ridge, cfg.pooling);
    if (area_override != nullptr) {
        result.area = *area_override;
        result.area.validate(model_cfg.num_layers);
    } else {
        result.area = geometry::select_shift_area(result.stage1_geometry.aggregate, cfg.beta);
    }
    if (cfg.stage2_steps == 0) {
        result.params = result.stage1;
        result.plan = ShiftPlan(corpus.dominant_name(), result.area,
                                result.stage1_geometry.vectors, cfg.use_shift_hooks);
        return result;
    }
    auto [params, plan] = train_stage2(cfg, corpus, result.stage1, result.area,
                                       result.stage1_geometry.vectors, &result.log);
    result.params = std::move(params);
    result.plan = std::move(plan);
    return result;
}

}  // namespace shifcon::training
