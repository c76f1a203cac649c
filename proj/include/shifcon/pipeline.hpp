#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "shifcon/corpus.hpp"
#include "shifcon/eval.hpp"
#include "shifcon/lda.hpp"
#include "shifcon/trainer.hpp"

namespace shifcon::clieval {

using repstore::PoolingMethod;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
    toymodel::SyntheticCorpusSpec corpus;
    toymodel::ModelConfig model;  // vocab_size 0 means "derive from the corpus"
    training::TrainingConfig training;
    EvalConfig eval;
    std::vector<double> sweep_betas = {0.2, 0.3, 0.5};

    toymodel::ModelConfig resolved_model() const {
        toymodel::ModelConfig m = model;
        if (m.vocab_size == 0)
            m.vocab_size = toymodel::TokenScheme{corpus.num_languages, corpus.num_concepts}.vocab_size();
        if (m.max_seq_len < corpus.max_sentence_len + 2)
            throw ConfigError("config: max_seq_len too small for the corpus sentences");
        m.validate();
        return m;
    }

    nlohmann::json to_json() const {
        return {{"corpus", corpus.to_json()},
                {"model", resolved_model().to_json()},
                {"training", training.to_json()},
                {"eval", eval.to_json()},
                {"sweep_betas", sweep_betas}};
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        if (!ok)
            throw ConfigError("config: unknown key '" + it.key() + "' in section '" + section +
                              "'");
    }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& j) {
    PipelineConfig cfg;
    cfg.model.num_layers = 8;
    cfg.model.hidden_dim = 32;
    cfg.model.num_heads = 2;
    cfg.model.vocab_size = 0;
    cfg.model.max_seq_len = 16;

    detail::check_keys(j, {"corpus", "model", "training", "eval", "sweep_betas"}, "top level");
    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        detail::check_keys(c,
                           {"num_languages", "num_concepts", "dominant_language",
                            "min_sentence_len", "max_sentence_len", "transition_seed",
                            "data_shares", "train_sentences", "calibration_sentences",
                            "test_sentences"},
                           "corpus");
        detail::maybe(c, "num_languages", cfg.corpus.num_languages);
        detail::maybe(c, "num_concepts", cfg.corpus.num_concepts);
        detail::maybe(c, "dominant_language", cfg.corpus.dominant_language);
        detail::maybe(c, "min_sentence_len", cfg.corpus.min_sentence_len);
        detail::maybe(c, "max_sentence_len", cfg.corpus.max_sentence_len);
        detail::maybe(c, "transition_seed", cfg.corpus.transition_seed);
        detail::maybe(c, "data_shares", cfg.corpus.data_shares);
        detail::maybe(c, "train_sentences", cfg.corpus.train_sentences);
        detail::maybe(c, "calibration_sentences", cfg.corpus.calibration_sentences);
        detail::maybe(c, "test_sentences", cfg.corpus.test_sentences);
        if (cfg.corpus.data_shares.size() != static_cast<std::size_t>(cfg.corpus.num_languages) &&
            !c.contains("data_shares")) {
            // default shares for a non-default language count: dominant 0.76,
            // the rest split evenly
            cfg.corpus.data_shares.assign(static_cast<std::size_t>(cfg.corpus.num_languages),
                                          0.24 / (cfg.corpus.num_languages - 1));
            cfg.corpus.data_shares[static_cast<std::size_t>(cfg.corpus.dominant_language)] = 0.76;
        }
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(
            m, {"num_layers", "hidden_dim", "num_heads", "vocab_size", "max_seq_len", "init_std"},
            "model");
        detail::maybe(m, "num_layers", cfg.model.num_layers);
        detail::maybe(m, "hidden_dim", cfg.model.hidden_dim);
        detail::maybe(m, "num_heads", cfg.model.num_heads);
        detail::maybe(m, "vocab_size", cfg.model.vocab_size);
        detail::maybe(m, "max_seq_len", cfg.model.max_seq_len);
        detail::maybe(m, "init_std", cfg.model.init_std);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        detail::check_keys(t,
                           {"alpha", "tau", "learning_rate", "momentum", "batch_size",
                            "mcl_batch_size", "stage1_steps", "stage2_steps", "seed", "pooling",
                            "mix_mcl_languages", "use_shift_hooks", "use_mcl",
                            "variance_threshold", "beta", "ridge"},
                           "training");
        detail::maybe(t, "alpha", cfg.training.alpha);
        detail::maybe(t, "tau", cfg.training.tau);
        detail::maybe(t, "learning_rate", cfg.training.learning_rate);
        detail::maybe(t, "momentum", cfg.training.momentum);
        detail::maybe(t, "batch_size", cfg.training.batch_size);
        detail::maybe(t, "mcl_batch_size", cfg.training.mcl_batch_size);
        detail::maybe(t, "stage1_steps", cfg.training.stage1_steps);
        detail::maybe(t, "stage2_steps", cfg.training.stage2_steps);
        detail::maybe(t, "seed", cfg.training.seed);
        if (t.contains("pooling"))
            cfg.training.pooling = repstore::parse_pooling(t.at("pooling").get<std::string>());
        detail::maybe(t, "mix_mcl_languages", cfg.training.mix_mcl_languages);
        detail::maybe(t, "use_shift_hooks", cfg.training.use_shift_hooks);
        detail::maybe(t, "use_mcl", cfg.training.use_mcl);
        detail::maybe(t, "variance_threshold", cfg.training.variance_threshold);
        detail::maybe(t, "beta", cfg.training.beta);
        detail::maybe(t, "ridge", cfg.training.ridge);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::check_keys(e, {"prompt_tokens", "max_generate", "consistency_threshold"}, "eval");
        detail::maybe(e, "prompt_tokens", cfg.eval.prompt_tokens);
        detail::maybe(e, "max_generate", cfg.eval.max_generate);
        detail::maybe(e, "consistency_threshold", cfg.eval.consistency_threshold);
    }
    detail::maybe(j, "sweep_betas", cfg.sweep_betas);
    cfg.corpus.validate();
    cfg.training.validate();
    cfg.resolved_model();
    return cfg;
}

inline PipelineConfig load_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Artifacts and the run manifest
// ---------------------------------------------------------------------------

/// Collects every file a command writes, with checksums, into manifest.json.
/// Nothing time- or path-dependent enters the manifest, so identical runs
/// produce byte-identical files.
class ArtifactSet {
public:
    explicit ArtifactSet(fs::path out_dir) : out_(std::move(out_dir)) {
        fs::create_directories(out_);
    }

    const fs::path& dir() const { return out_; }

    fs::path write_container(const std::string& name, const repstore::Container& c) {
        const fs::path p = out_ / name;
        repstore::write_container(c, p);
        record(name, p);
        return p;
    }

    fs::path write_json(const std::string& name, const nlohmann::json& j) {
        const fs::path p = out_ / name;
        std::ofstream f(p, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + p.string() + "'");
        f << j.dump(2) << '\n';
        f.close();
        record(name, p);
        return p;
    }

    fs::path write_text(const std::string& name, const std::string& text) {
        const fs::path p = out_ / name;
        std::ofstream f(p, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + p.string() + "'");
        f << text;
        f.close();
        record(name, p);
        return p;
    }

    void finalize(const std::string& command, const nlohmann::json& config) {
        nlohmann::json manifest;
        manifest["format_version"] = 1;
        manifest["command"] = command;
        manifest["config"] = config;
        manifest["config_fnv64"] = to_hex(fnv1a64(config.dump().data(), config.dump().size()));
        manifest["artifacts"] = artifacts_;
        const fs::path p = out_ / "manifest.json";
        std::ofstream f(p, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + p.string() + "'");
        f << manifest.dump(2) << '\n';
    }

private:
    void record(const std::string& name, const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
        artifacts_[name] = {{"bytes", bytes.size()},
                            {"fnv64", to_hex(fnv1a64(bytes.data(), bytes.size()))}};
    }

    fs::path out_;
    nlohmann::json artifacts_ = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Shared artifact helpers
// ---------------------------------------------------------------------------

inline repstore::Container vectors_to_container(const geometry::LanguageVectorTable& table,
                                                PoolingMethod pooling) {
    repstore::Container c;
    c.kind = "language_vectors";
    c.meta["languages"] = table.languages;
    c.meta["num_layers"] = table.num_layers;
    c.meta["dim"] = table.dim;
    c.meta["pooling"] = repstore::pooling_name(pooling);
    for (const auto& lang : table.languages) {
        Matrix m(static_cast<std::size_t>(table.num_layers), static_cast<std::size_t>(table.dim));
        for (int layer = 1; layer <= table.num_layers; ++layer) {
            const auto& v = table.at(lang, layer);
            std::copy(v.begin(), v.end(), m.row(static_cast<std::size_t>(layer) - 1).begin());
        }
        c.blocks.push_back({lang, std::move(m)});
    }
    return c;
}

inline geometry::LanguageVectorTable vectors_from_container(const repstore::Container& c) {
    if (c.kind != "language_vectors")
        throw FormatError("container kind '" + c.kind + "' is not a vector table");
    geometry::LanguageVectorTable table;
    table.languages = c.meta.at("languages").get<std::vector<std::string>>();
    table.num_layers = c.meta.at("num_layers").get<int>();
    table.dim = c.meta.at("dim").get<int>();
    for (const auto& lang : table.languages) {
        const Matrix& m = c.block(lang);
        std::vector<Vec> per_layer;
        for (std::size_t i = 0; i < m.rows; ++i)
            per_layer.push_back(Vec(m.row(i).begin(), m.row(i).end()));
        table.vectors[lang] = std::move(per_layer);
    }
    return table;
}

inline std::string profile_csv(const geometry::DistanceProfile& profile) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,distance\n";
    for (int layer = 1; layer <= profile.num_layers(); ++layer)
        out << layer << ',' << profile.layer_distances[static_cast<std::size_t>(layer) - 1] << '\n';
    return out.str();
}

inline geometry::DistanceProfile profile_from_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open profile '" + path.string() + "'");
    std::string line;
    if (!std::getline(f, line) || line != "layer,distance")
        throw FormatError("'" + path.string() + "' is not a layer,distance profile");
    geometry::DistanceProfile profile;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw FormatError("'" + path.string() + "' has a malformed row: " + line);
        profile.layer_distances.push_back(std::stod(line.substr(comma + 1)));
    }
    if (profile.layer_distances.empty())
        throw FormatError("'" + path.string() + "' contains no layers");
    return profile;
}

inline int worker_count(std::size_t jobs) {
    int n = 1;
    if (const char* env = std::getenv("SHIFCON_THREADS")) {
        n = std::atoi(env);
        if (n < 1) n = 1;
    }
    return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(n), jobs));
}

/// Run fn(0..count-1), possibly in parallel (SHIFCON_THREADS caps workers).
/// Each job must be fully isolated; the first exception, in job order, is
/// rethrown after all jobs finish.
template <typename Fn>
inline void run_jobs(std::size_t count, Fn&& fn) {
    const int workers = worker_count(count);
    std::vector<std::exception_ptr> errors(count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct TrainArtifacts {
    training::TrainResult result;
    toymodel::ParallelCorpus corpus;
};

/// corpus -> stage-1 -> dump -> vectors -> profile -> select -> stage-2,
/// writing every artifact. `area_override` comes from --layers.
inline TrainArtifacts run_train(const PipelineConfig& cfg, ArtifactSet& artifacts,
                                const geometry::ShiftArea* area_override = nullptr) {
    TrainArtifacts out{{}, toymodel::make_parallel_corpus(cfg.corpus)};
    artifacts.write_container("corpus.shfc", toymodel::corpus_to_container(out.corpus));

    out.result = training::train_two_stage(cfg.training, out.corpus, cfg.resolved_model(),
                                           area_override);
    const auto& r = out.result;
    artifacts.write_container("model_stage1.shfc", toymodel::params_to_container(r.stage1));
    artifacts.write_container("activations_stage1.shfc",
                              repstore::dump_to_container(r.stage1_geometry.dump));
    artifacts.write_container("vectors.shfc",
                              vectors_to_container(r.stage1_geometry.vectors, cfg.training.pooling));
    for (const auto& profile : r.stage1_geometry.profiles)
        artifacts.write_text("profile_" + profile.language_pair.first + ".csv",
                             profile_csv(profile));
    artifacts.write_text("profile.csv", profile_csv(r.stage1_geometry.aggregate));
    artifacts.write_json("area.json", r.area.to_json());
    artifacts.write_container("model_shifcon.shfc", toymodel::params_to_container(r.params));
    artifacts.write_json("plan.json", r.plan.to_json());

    std::ostringstream log;
    for (const auto& entry : r.log) log << entry.to_json().dump() << '\n';
    artifacts.write_text("training_log.jsonl", log.str());
    return out;
}

struct PipelineOutcome {
    EvalReport stage1;
    EvalReport shifcon;
    double distance_reduction = 0.0;
};

inline PipelineOutcome run_pipeline(const PipelineConfig& cfg, ArtifactSet& artifacts,
                                    const geometry::ShiftArea* area_override = nullptr) {
    TrainArtifacts trained = run_train(cfg, artifacts, area_override);
    const auto& r = trained.result;

    ShiftPlan disabled_plan(trained.corpus.dominant_name(), r.area, r.stage1_geometry.vectors,
                            false);
    PipelineOutcome outcome;
    outcome.stage1 = evaluate(r.stage1, trained.corpus, disabled_plan, r.area,
                              cfg.training.variance_threshold, cfg.training.ridge, cfg.eval,
                              "stage1_msft", false);
    outcome.shifcon = evaluate(r.params, trained.corpus, r.plan, r.area,
                               cfg.training.variance_threshold, cfg.training.ridge, cfg.eval,
                               "shifcon", cfg.training.use_mcl);
    outcome.distance_reduction =
        outcome.stage1.mean_area_distance > 0.0
            ? 1.0 - outcome.shifcon.mean_area_distance / outcome.stage1.mean_area_distance
            : 0.0;

    nlohmann::json report;
    report["stage1"] = outcome.stage1.to_json();
    report["shifcon"] = outcome.shifcon.to_json();
    report["distance_reduction"] = outcome.distance_reduction;
    report["area"] = r.area.to_json();
    artifacts.write_json("report.json", report);
    return outcome;
}

struct VariantSpec {
    std::string name;
    bool use_shift_hooks;
    bool use_mcl;
};

inline const std::vector<VariantSpec>& ablation_variants() {
    static const std::vector<VariantSpec> variants = {
        {"msft_only", false, false},
        {"shifcon", true, true},
        {"wo_shift_projection", false, true},
        {"wo_mcl", true, false},
    };
    return variants;
}

/// Four stage-2 variants from one shared stage-1 checkpoint: the full
/// method, MSFT continuation, MCL on original representations, and shift
/// hooks without MCL.
inline std::vector<EvalReport> run_ablate(const PipelineConfig& cfg, ArtifactSet& artifacts) {
    auto corpus = toymodel::make_parallel_corpus(cfg.corpus);
    artifacts.write_container("corpus.shfc", toymodel::corpus_to_container(corpus));

    auto stage1 = training::train_stage1(cfg.training, corpus, cfg.resolved_model());
    artifacts.write_container("model_stage1.shfc", toymodel::params_to_container(stage1));
    auto geo = training::analyze_geometry(stage1, corpus, cfg.training.variance_threshold,
                                          cfg.training.ridge, cfg.training.pooling);
    auto area = geometry::select_shift_area(geo.aggregate, cfg.training.beta);
    artifacts.write_json("area.json", area.to_json());

    const auto& variants = ablation_variants();
    std::vector<EvalReport> reports(variants.size());
    std::vector<toymodel::ToyModelParams> models(variants.size());
    run_jobs(variants.size(), [&](std::size_t i) {
        training::TrainingConfig vcfg = cfg.training;
        vcfg.use_shift_hooks = variants[i].use_shift_hooks;
        vcfg.use_mcl = variants[i].use_mcl;
        auto [params, plan] = training::train_stage2(vcfg, corpus, stage1, area, geo.vectors);
        reports[i] = evaluate(params, corpus, plan, area, cfg.training.variance_threshold,
                              cfg.training.ridge, cfg.eval, variants[i].name, vcfg.use_mcl);
        models[i] = std::move(params);
    });

    nlohmann::json report;
    report["area"] = area.to_json();
    report["variants"] = nlohmann::json::array();
    std::ostringstream csv;
    csv.precision(17);
    csv << "variant,nondominant_accuracy,nondominant_consistency,mean_area_distance\n";
    for (std::size_t i = 0; i < variants.size(); ++i) {
        artifacts.write_container("model_" + variants[i].name + ".shfc",
                                  toymodel::params_to_container(models[i]));
        report["variants"].push_back(reports[i].to_json());
        csv << variants[i].name << ',' << reports[i].nondominant_accuracy << ','
            << reports[i].nondominant_consistency << ',' << reports[i].mean_area_distance << '\n';
    }
    artifacts.write_json("ablate_report.json", report);
    artifacts.write_text("ablate.csv", csv.str());
    return reports;
}

/// One stage-2 model per beta from a shared stage-1 checkpoint; rows record
/// per-beta failures without aborting the sweep.
inline std::string run_beta_sweep(const PipelineConfig& cfg, const std::vector<double>& betas,
                                  ArtifactSet& artifacts) {
    auto corpus = toymodel::make_parallel_corpus(cfg.corpus);
    auto stage1 = training::train_stage1(cfg.training, corpus, cfg.resolved_model());
    artifacts.write_container("model_stage1.shfc", toymodel::params_to_container(stage1));
    auto geo = training::analyze_geometry(stage1, corpus, cfg.training.variance_threshold,
                                          cfg.training.ridge, cfg.training.pooling);
    artifacts.write_text("profile.csv", profile_csv(geo.aggregate));

    struct Row {
        double beta;
        std::string status = "ok";
        EvalReport report;
    };
    std::vector<Row> rows(betas.size());
    run_jobs(betas.size(), [&](std::size_t i) {
        rows[i].beta = betas[i];
        try {
            auto area = geometry::select_shift_area(geo.aggregate, betas[i]);
            training::TrainingConfig vcfg = cfg.training;
            vcfg.beta = betas[i];
            auto [params, plan] = training::train_stage2(vcfg, corpus, stage1, area, geo.vectors);
            rows[i].report = evaluate(params, corpus, plan, area, cfg.training.variance_threshold,
                                      cfg.training.ridge, cfg.eval,
                                      "beta_" + std::to_string(betas[i]), vcfg.use_mcl);
        } catch (const Error& e) {
            rows[i].status = std::string("error: ") + e.what();
        }
    });

    std::ostringstream csv;
    csv.precision(17);
    csv << "beta,status,nondominant_accuracy,nondominant_consistency,mean_area_distance\n";
    for (const auto& row : rows) {
        std::string status = row.status;
        for (char& ch : status)
            if (ch == ',' || ch == '\n') ch = ';';
        csv << row.beta << ',' << status << ',';
        if (row.status == "ok")
            csv << row.report.nondominant_accuracy << ',' << row.report.nondominant_consistency
                << ',' << row.report.mean_area_distance << '\n';
        else
            csv << ",,\n";
    }
    const std::string text = csv.str();
    artifacts.write_text("beta_sweep.csv", text);
    return text;
}

/// Figure-ready LDA export: sentence vectors per language at one layer,
/// projected onto the requested 1-based components.
inline std::string export_lda_csv(const repstore::ActivationDump& dump, int layer,
                                  const std::vector<int>& components,
                                  PoolingMethod pooling = PoolingMethod::Mean) {
    if (dump.languages.size() < 2)
        throw InvalidInputError("export-lda: need at least two languages");
    std::vector<Matrix> per_lang;
    std::size_t total_rows = 0;
    for (const auto& lang : dump.languages) {
        per_lang.push_back(repstore::sentence_vectors(dump, lang, layer, pooling));
        total_rows += per_lang.back().rows;
    }
    Matrix x(total_rows, static_cast<std::size_t>(dump.hidden_dim));
    std::vector<int> labels(total_rows);
    std::size_t row = 0;
    for (std::size_t l = 0; l < per_lang.size(); ++l) {
        for (std::size_t i = 0; i < per_lang[l].rows; ++i, ++row) {
            std::copy(per_lang[l].row(i).begin(), per_lang[l].row(i).end(), x.row(row).begin());
            labels[row] = static_cast<int>(l);
        }
    }
    const int max_components = static_cast<int>(dump.languages.size()) - 1;
    auto projection = geometry::lda_fit(x, labels, max_components);
    Matrix projected = geometry::lda_project(projection, x, components);

    std::ostringstream csv;
    csv.precision(17);
    csv << "sample_id,language";
    for (int c : components) csv << ",comp_" << c;
    csv << '\n';
    row = 0;
    for (std::size_t l = 0; l < per_lang.size(); ++l)
        for (std::size_t i = 0; i < per_lang[l].rows; ++i, ++row) {
            csv << i << ',' << dump.languages[l];
            for (std::size_t c = 0; c < components.size(); ++c) csv << ',' << projected(row, c);
            csv << '\n';
        }
    return csv.str();
}

}  // namespace shifcon::clieval
