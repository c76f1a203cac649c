#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "shifcon/corpus.hpp"
#include "shifcon/dumping.hpp"
#include "shifcon/geometry.hpp"
#include "shifcon/intervention.hpp"
#include "shifcon/model.hpp"
#include "shifcon/trainer.hpp"

namespace shifcon::clieval {

using intervention::ShiftPlan;
using numkit::Matrix;
using numkit::Vec;
using toymodel::ParallelCorpus;
using toymodel::TokenScheme;
using toymodel::ToyModelParams;

struct EvalConfig {
    int prompt_tokens = 3;
    int max_generate = 12;
    double consistency_threshold = 0.9;

    nlohmann::json to_json() const {
        return {{"prompt_tokens", prompt_tokens},
                {"max_generate", max_generate},
                {"consistency_threshold", consistency_threshold}};
    }
};

struct EvalReport {
    std::string variant;
    bool shift_enabled = false;
    bool mcl_enabled = false;
    std::map<std::string, double> next_token_accuracy;
    std::map<std::string, double> language_consistency;
    double mean_area_distance = 0.0;
    double nondominant_accuracy = 0.0;
    double nondominant_consistency = 0.0;

    nlohmann::json to_json() const {
        return {{"variant", variant},
                {"shift_enabled", shift_enabled},
                {"mcl_enabled", mcl_enabled},
                {"next_token_accuracy", next_token_accuracy},
                {"language_consistency", language_consistency},
                {"mean_area_distance", mean_area_distance},
                {"nondominant_accuracy", nondominant_accuracy},
                {"nondominant_consistency", nondominant_consistency}};
    }
};

/// A generated sequence is consistent when at least `threshold` of its
/// non-special tokens belong to the query language (exact detection through
/// the token scheme). Sequences with no content tokens count as
/// inconsistent.
inline double language_consistency(const std::vector<std::vector<int>>& outputs,
                                   int query_language, const TokenScheme& scheme,
                                   double threshold = 0.9) {
    if (outputs.empty()) throw InvalidInputError("language_consistency: no outputs");
    std::size_t consistent = 0;
    for (const auto& seq : outputs) {
        std::size_t content = 0, matching = 0;
        for (int tok : seq) {
            if (scheme.is_special(tok)) continue;
            ++content;
            if (scheme.language_of(tok) == query_language) ++matching;
        }
        if (content > 0 &&
            static_cast<double>(matching) >= threshold * static_cast<double>(content))
            ++consistent;
    }
    return static_cast<double>(consistent) / static_cast<double>(outputs.size());
}

/// Teacher-forced argmax accuracy over the positions predicting tokens
/// 2..T of each rendered test sentence.
inline double next_token_accuracy(const ToyModelParams& params, const ParallelCorpus& corpus,
                                  const std::vector<int>& sentence_ids, int language,
                                  const std::vector<toymodel::Hook>& hooks) {
    std::size_t hits = 0, total = 0;
    for (int id : sentence_ids) {
        const auto tokens = corpus.render(id, language);
        auto trace = toymodel::forward_with_hooks(params, tokens, hooks);
        for (std::size_t pos = 0; pos + 1 < tokens.size(); ++pos) {
            auto row = trace.logits.row(pos);
            std::size_t best = 0;
            for (std::size_t j = 1; j < row.size(); ++j)
                if (row[j] > row[best]) best = j;
            if (static_cast<int>(best) == tokens[pos + 1]) ++hits;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// Mean subspace distance over the selected layers between each language's
/// dominant-like stream and the dominant stream. The dominant-like stream
/// comes from hooked forwards with vectors recomputed from the measured
/// model (pre-hook at L_bk, so the states are still in the dominant
/// subspace); the dominant stream and the vectors come from unhooked
/// forwards.
inline double mean_area_distance(const ToyModelParams& params, const ParallelCorpus& corpus,
                                 const geometry::ShiftArea& area, double variance_threshold,
                                 double ridge) {
    auto plain = toymodel::collect_activation_dump(params, corpus, corpus.calibration_ids);
    auto vectors = geometry::compute_language_vectors(plain, repstore::PoolingMethod::Mean);
    const std::string dominant = corpus.dominant_name();
    ShiftPlan plan(dominant, area, vectors, true);

    toymodel::HooksProvider hooks_for = [&](const std::string& lang) {
        return intervention::build_hooks(plan, lang);
    };
    toymodel::LayerStatePicker pick = [&](const toymodel::ForwardTrace& trace,
                                          int layer) -> const Matrix& {
        if (layer == area.l_bk) {
            auto it = trace.hooked.find(layer);
            if (it != trace.hooked.end()) return it->second.first;  // before shift-backward
        }
        return trace.layer_state(layer);
    };
    auto hooked = toymodel::collect_activation_dump(params, corpus, corpus.calibration_ids,
                                                    hooks_for, pick);

    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& lang : plain.languages) {
        if (lang == dominant) continue;
        for (int layer : area.selected_layers) {
            auto like = geometry::fit_subspace(hooked.layer_matrix(lang, layer), variance_threshold);
            auto dom = geometry::fit_subspace(plain.layer_matrix(dominant, layer), variance_threshold);
            sum += geometry::subspace_distance(like, dom, ridge);
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

/// Full per-variant evaluation: per-language teacher-forced accuracy and
/// generation-based language consistency under the variant's hooks, plus
/// the area alignment diagnostic.
inline EvalReport evaluate(const ToyModelParams& params, const ParallelCorpus& corpus,
                           const ShiftPlan& plan, const geometry::ShiftArea& area,
                           double variance_threshold, double ridge, const EvalConfig& cfg,
                           const std::string& variant, bool mcl_enabled) {
    EvalReport report;
    report.variant = variant;
    report.shift_enabled = plan.enabled;
    report.mcl_enabled = mcl_enabled;

    double nd_acc = 0.0, nd_cons = 0.0;
    std::size_t nd_count = 0;
    for (int lang = 0; lang < corpus.spec.num_languages; ++lang) {
        const std::string name = corpus.scheme.language_name(lang);
        auto hooks = intervention::build_hooks(plan, name);
        report.next_token_accuracy[name] =
            next_token_accuracy(params, corpus, corpus.test_ids, lang, hooks);

        std::vector<std::vector<int>> outputs;
        for (int id : corpus.test_ids) {
            const auto full = corpus.render(id, lang);
            std::vector<int> prompt(full.begin(),
                                    full.begin() + 1 +
                                        std::min<std::ptrdiff_t>(cfg.prompt_tokens,
                                                                 static_cast<std::ptrdiff_t>(
                                                                     full.size() - 2)));
            outputs.push_back(toymodel::generate(params, prompt, hooks, cfg.max_generate));
        }
        report.language_consistency[name] =
            language_consistency(outputs, lang, corpus.scheme, cfg.consistency_threshold);

        if (lang != corpus.spec.dominant_language) {
            nd_acc += report.next_token_accuracy[name];
            nd_cons += report.language_consistency[name];
            ++nd_count;
        }
    }
    report.nondominant_accuracy = nd_acc / static_cast<double>(nd_count);
    report.nondominant_consistency = nd_cons / static_cast<double>(nd_count);
    report.mean_area_distance =
        mean_area_distance(params, corpus, area, variance_threshold, ridge);
    return report;
}

}  // namespace shifcon::clieval
