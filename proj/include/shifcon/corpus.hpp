#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shifcon/common.hpp"
#include "shifcon/repstore.hpp"
#include "shifcon/tokens.hpp"

namespace shifcon::toymodel {

/// Generator settings for the synthetic multilingual corpus: concept
/// sequences come from one shared Markov chain, each sequence is rendered
/// into every language, and the training split is apportioned by
/// data_shares (an imbalanced mix with one dominant language).
struct SyntheticCorpusSpec {
    int num_languages = 4;
    int num_concepts = 64;
    int dominant_language = 0;
    int min_sentence_len = 6;
    int max_sentence_len = 12;
    std::uint64_t transition_seed = 7;
    std::vector<double> data_shares = {0.76, 0.08, 0.08, 0.08};
    int train_sentences = 4096;
    int calibration_sentences = 256;
    int test_sentences = 128;

    void validate() const {
        if (num_languages < 2) throw ConfigError("corpus: need at least 2 languages");
        if (num_concepts < 2) throw ConfigError("corpus: need at least 2 concepts");
        if (dominant_language < 0 || dominant_language >= num_languages)
            throw ConfigError("corpus: dominant language out of range");
        if (min_sentence_len < 1 || max_sentence_len < min_sentence_len)
            throw ConfigError("corpus: bad sentence length range");
        if (static_cast<int>(data_shares.size()) != num_languages)
            throw ConfigError("corpus: data_shares must list one share per language");
        double sum = 0.0;
        for (double s : data_shares) {
            if (s < 0.0) throw ConfigError("corpus: negative data share");
            sum += s;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError("corpus: data shares must sum to 1 (got " + std::to_string(sum) + ")");
        for (int l = 0; l < num_languages; ++l)
            if (l != dominant_language &&
                data_shares[static_cast<std::size_t>(l)] >=
                    data_shares[static_cast<std::size_t>(dominant_language)])
                throw ConfigError("corpus: dominant language share must be strictly largest");
        if (train_sentences < 1 || calibration_sentences < 1 || test_sentences < 1)
            throw ConfigError("corpus: split sizes must be positive");
    }

    nlohmann::json to_json() const {
        return {{"num_languages", num_languages},
                {"num_concepts", num_concepts},
                {"dominant_language", dominant_language},
                {"min_sentence_len", min_sentence_len},
                {"max_sentence_len", max_sentence_len},
                {"transition_seed", transition_seed},
                {"data_shares", data_shares},
                {"train_sentences", train_sentences},
                {"calibration_sentences", calibration_sentences},
                {"test_sentences", test_sentences}};
    }
};

/// The full parallel pool plus split assignments. Concept sequences are
/// shared; a sentence id renders into any language via render().
struct ParallelCorpus {
    SyntheticCorpusSpec spec;
    TokenScheme scheme;
    std::vector<std::vector<int>> concept_sequences;  // per sentence id

    // train entries are (sentence id, language index), pre-shuffled
    std::vector<std::pair<int, int>> train_entries;
    std::vector<int> calibration_ids;
    std::vector<int> test_ids;

    std::string dominant_name() const { return scheme.language_name(spec.dominant_language); }

    /// BOS + content tokens + EOS.
    std::vector<int> render(int sentence_id, int language) const {
        const auto& concepts = concept_sequences.at(static_cast<std::size_t>(sentence_id));
        std::vector<int> tokens;
        tokens.reserve(concepts.size() + 2);
        tokens.push_back(TokenScheme::kBos);
        for (int c : concepts) tokens.push_back(scheme.encode(language, c));
        tokens.push_back(TokenScheme::kEos);
        return tokens;
    }

    int max_rendered_len() const {
        return spec.max_sentence_len + 2;
    }

    std::vector<int> train_count_per_language() const {
        std::vector<int> counts(static_cast<std::size_t>(spec.num_languages), 0);
        for (const auto& [id, lang] : train_entries) {
            (void)id;
            ++counts[static_cast<std::size_t>(lang)];
        }
        return counts;
    }
};

namespace detail {

// Largest-remainder apportionment of n items by share, ties toward lower
// index; every count lands within 1 of share * n.
inline std::vector<int> apportion(const std::vector<double>& shares, int n) {
    std::vector<int> counts(shares.size());
    std::vector<std::pair<double, std::size_t>> rema;
    int assigned = 0;
    for (std::size_t i = 0; i < shares.size(); ++i) {
        const double exact = shares[i] * n;
        counts[i] = static_cast<int>(std::floor(exact + 1e-9));
        assigned += counts[i];
        rema.push_back({exact - counts[i], i});
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int r = 0; r < n - assigned; ++r) ++counts[rema[static_cast<std::size_t>(r)].second];
    return counts;
}

}  // namespace detail

/// Build the corpus: a seeded Markov chain over concepts, sentence ids for
/// train / calibration / test, and the share-respecting train assignment.
inline ParallelCorpus make_parallel_corpus(const SyntheticCorpusSpec& spec) {
    spec.validate();
    ParallelCorpus corpus;
    corpus.spec = spec;
    corpus.scheme = TokenScheme{spec.num_languages, spec.num_concepts};

    Rng rng(splitmix64(spec.transition_seed));

    // Peaky transition rows so next-concept prediction is learnable.
    const std::size_t c = static_cast<std::size_t>(spec.num_concepts);
    std::vector<std::vector<double>> transition(c, std::vector<double>(c));
    std::vector<double> initial(c);
    for (std::size_t i = 0; i < c; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            transition[i][j] = std::exp(2.0 * rng.normal());
            sum += transition[i][j];
        }
        for (double& w : transition[i]) w /= sum;
    }
    {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            initial[j] = std::exp(rng.normal());
            sum += initial[j];
        }
        for (double& w : initial) w /= sum;
    }

    auto sample_categorical = [&](const std::vector<double>& probs) {
        const double u = rng.uniform01();
        double acc = 0.0;
        for (std::size_t j = 0; j < probs.size(); ++j) {
            acc += probs[j];
            if (u < acc) return static_cast<int>(j);
        }
        return static_cast<int>(probs.size()) - 1;
    };

    const int total =
        spec.train_sentences + spec.calibration_sentences + spec.test_sentences;
    corpus.concept_sequences.reserve(static_cast<std::size_t>(total));
    for (int s = 0; s < total; ++s) {
        const int len =
            static_cast<int>(rng.uniform_int(spec.min_sentence_len, spec.max_sentence_len));
        std::vector<int> seq;
        seq.reserve(static_cast<std::size_t>(len));
        int current = sample_categorical(initial);
        seq.push_back(current);
        for (int t = 1; t < len; ++t) {
            current = sample_categorical(transition[static_cast<std::size_t>(current)]);
            seq.push_back(current);
        }
        corpus.concept_sequences.push_back(std::move(seq));
    }

    const std::vector<int> counts = detail::apportion(spec.data_shares, spec.train_sentences);
    int next_id = 0;
    for (int lang = 0; lang < spec.num_languages; ++lang)
        for (int k = 0; k < counts[static_cast<std::size_t>(lang)]; ++k)
            corpus.train_entries.push_back({next_id++, lang});
    rng.shuffle(corpus.train_entries);

    for (int k = 0; k < spec.calibration_sentences; ++k) corpus.calibration_ids.push_back(next_id++);
    for (int k = 0; k < spec.test_sentences; ++k) corpus.test_ids.push_back(next_id++);
    return corpus;
}

/// Serialize into the .shfc container (token ids stored as doubles; they are
/// small integers, so the round-trip is exact).
inline repstore::Container corpus_to_container(const ParallelCorpus& corpus) {
    repstore::Container c;
    c.kind = "corpus";
    c.meta["spec"] = corpus.spec.to_json();
    nlohmann::json train = nlohmann::json::array();
    for (const auto& [id, lang] : corpus.train_entries) train.push_back({id, lang});
    c.meta["train_entries"] = train;
    c.meta["calibration_ids"] = corpus.calibration_ids;
    c.meta["test_ids"] = corpus.test_ids;

    numkit::Matrix lengths(corpus.concept_sequences.size(), 1);
    std::size_t total_tokens = 0;
    for (std::size_t i = 0; i < corpus.concept_sequences.size(); ++i) {
        lengths(i, 0) = static_cast<double>(corpus.concept_sequences[i].size());
        total_tokens += corpus.concept_sequences[i].size();
    }
    numkit::Matrix flat(1, total_tokens);
    std::size_t pos = 0;
    for (const auto& seq : corpus.concept_sequences)
        for (int v : seq) flat(0, pos++) = static_cast<double>(v);
    c.blocks.push_back({"sentence_lengths", std::move(lengths)});
    c.blocks.push_back({"concepts", std::move(flat)});
    return c;
}

inline ParallelCorpus corpus_from_container(const repstore::Container& c) {
    if (c.kind != "corpus") throw FormatError("container kind '" + c.kind + "' is not a corpus");
    ParallelCorpus corpus;
    try {
        const auto& js = c.meta.at("spec");
        SyntheticCorpusSpec spec;
        spec.num_languages = js.at("num_languages").get<int>();
        spec.num_concepts = js.at("num_concepts").get<int>();
        spec.dominant_language = js.at("dominant_language").get<int>();
        spec.min_sentence_len = js.at("min_sentence_len").get<int>();
        spec.max_sentence_len = js.at("max_sentence_len").get<int>();
        spec.transition_seed = js.at("transition_seed").get<std::uint64_t>();
        spec.data_shares = js.at("data_shares").get<std::vector<double>>();
        spec.train_sentences = js.at("train_sentences").get<int>();
        spec.calibration_sentences = js.at("calibration_sentences").get<int>();
        spec.test_sentences = js.at("test_sentences").get<int>();
        corpus.spec = spec;
        corpus.scheme = TokenScheme{spec.num_languages, spec.num_concepts};
        for (const auto& e : c.meta.at("train_entries"))
            corpus.train_entries.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
        corpus.calibration_ids = c.meta.at("calibration_ids").get<std::vector<int>>();
        corpus.test_ids = c.meta.at("test_ids").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corpus metadata is malformed: ") + e.what());
    }
    const auto& lengths = c.block("sentence_lengths");
    const auto& flat = c.block("concepts");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < lengths.rows; ++i) {
        const auto len = static_cast<std::size_t>(lengths(i, 0));
        std::vector<int> seq(len);
        for (std::size_t t = 0; t < len; ++t) seq[t] = static_cast<int>(flat(0, pos++));
        corpus.concept_sequences.push_back(std::move(seq));
    }
    return corpus;
}

}  // namespace shifcon::toymodel
