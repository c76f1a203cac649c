// Command-line driver for the shift-based multilingual alignment pipeline:
// synthetic corpus generation, two-stage training, subspace diagnostics,
// layer-area selection, evaluation, ablations and figure exports.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shifcon/pipeline.hpp"

namespace fs = std::filesystem;
using namespace shifcon;

namespace {

struct GlobalOptions {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::optional<double> beta;
    std::string layers;  // "A:B"
};

clieval::PipelineConfig resolve_config(const GlobalOptions& opts) {
    clieval::PipelineConfig cfg = opts.config_path.empty()
                                      ? clieval::parse_config(nlohmann::json::object())
                                      : clieval::load_config(opts.config_path);
    if (opts.seed) {
        cfg.training.seed = *opts.seed;
        cfg.corpus.transition_seed = splitmix64(*opts.seed ^ 0xc0debull);
    }
    if (opts.beta) cfg.training.beta = *opts.beta;
    return cfg;
}

std::optional<geometry::ShiftArea> parse_layers(const std::string& layers, double beta) {
    if (layers.empty()) return std::nullopt;
    const auto colon = layers.find(':');
    if (colon == std::string::npos)
        throw ConfigError("--layers expects the form A:B (e.g. 4:6)");
    geometry::ShiftArea area;
    try {
        area.l_to = std::stoi(layers.substr(0, colon));
        area.l_bk = std::stoi(layers.substr(colon + 1));
    } catch (const std::exception&) {
        throw ConfigError("--layers expects integer layer indices A:B");
    }
    if (area.l_to >= area.l_bk)
        throw ConfigError("--layers requires A < B (shift-toward strictly before shift-backward)");
    area.beta = beta;
    for (int l = area.l_to; l <= area.l_bk; ++l) area.selected_layers.push_back(l);
    area.contiguous = true;
    return area;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    if (out.empty())
        throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    return out;
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    if (out.empty())
        throw ConfigError("expected a comma-separated number list, got '" + text + "'");
    return out;
}

void print_report(const clieval::EvalReport& r) {
    std::cout << "  [" << r.variant << "] nondominant accuracy " << r.nondominant_accuracy
              << ", consistency " << r.nondominant_consistency << ", area distance "
              << r.mean_area_distance << "\n";
}

int dispatch(const std::string& command, const GlobalOptions& opts,
             const std::string& model_path, const std::string& dump_path,
             const std::string& vectors_path, const std::string& profile_path,
             const std::string& split, int layer, const std::string& components,
             const std::string& betas) {
    clieval::PipelineConfig cfg = resolve_config(opts);
    auto area_override = parse_layers(opts.layers, cfg.training.beta);
    clieval::ArtifactSet artifacts{fs::path(opts.out_dir)};
    const fs::path out(opts.out_dir);

    auto default_path = [&](const std::string& given, const char* fallback) {
        return given.empty() ? (out / fallback) : fs::path(given);
    };

    if (command == "pipeline") {
        auto outcome =
            clieval::run_pipeline(cfg, artifacts, area_override ? &*area_override : nullptr);
        artifacts.finalize("pipeline", cfg.to_json());
        std::cout << "pipeline complete; artifacts in " << opts.out_dir << "\n";
        print_report(outcome.stage1);
        print_report(outcome.shifcon);
        std::cout << "  area distance reduction " << outcome.distance_reduction << "\n";
        return 0;
    }
    if (command == "train") {
        clieval::run_train(cfg, artifacts, area_override ? &*area_override : nullptr);
        artifacts.finalize("train", cfg.to_json());
        std::cout << "training complete; artifacts in " << opts.out_dir << "\n";
        return 0;
    }
    if (command == "dump") {
        auto corpus = toymodel::make_parallel_corpus(cfg.corpus);
        auto params = toymodel::params_from_container(
            repstore::read_container(default_path(model_path, "model_stage1.shfc")));
        const auto& ids = split == "test" ? corpus.test_ids : corpus.calibration_ids;
        auto dump = toymodel::collect_activation_dump(params, corpus, ids);
        artifacts.write_container("activations.shfc", repstore::dump_to_container(dump));
        artifacts.finalize("dump", cfg.to_json());
        std::cout << "wrote activations.shfc (" << split << " split)\n";
        return 0;
    }
    if (command == "vectors") {
        auto dump = repstore::dump_from_container(
            repstore::read_container(default_path(dump_path, "activations_stage1.shfc")));
        auto table = geometry::compute_language_vectors(dump, cfg.training.pooling);
        artifacts.write_container("vectors.shfc",
                                  clieval::vectors_to_container(table, cfg.training.pooling));
        artifacts.finalize("vectors", cfg.to_json());
        std::cout << "wrote vectors.shfc\n";
        return 0;
    }
    if (command == "profile") {
        auto dump = repstore::dump_from_container(
            repstore::read_container(default_path(dump_path, "activations_stage1.shfc")));
        auto table = clieval::vectors_from_container(
            repstore::read_container(default_path(vectors_path, "vectors.shfc")));
        const std::string dominant =
            toymodel::TokenScheme{cfg.corpus.num_languages, cfg.corpus.num_concepts}.language_name(
                cfg.corpus.dominant_language);
        std::vector<geometry::DistanceProfile> profiles;
        for (const auto& lang : dump.languages) {
            if (lang == dominant) continue;
            std::vector<numkit::Matrix> shifted, dom;
            for (int l = 1; l <= dump.num_layers; ++l) {
                shifted.push_back(intervention::shift_toward(
                    dump.layer_matrix(lang, l), table.at(lang, l), table.at(dominant, l)));
                dom.push_back(dump.layer_matrix(dominant, l));
            }
            profiles.push_back(geometry::distance_profile(shifted, dom,
                                                          cfg.training.variance_threshold,
                                                          cfg.training.ridge, lang, dominant));
            artifacts.write_text("profile_" + lang + ".csv",
                                 clieval::profile_csv(profiles.back()));
        }
        artifacts.write_text("profile.csv",
                             clieval::profile_csv(geometry::mean_profile(profiles)));
        artifacts.finalize("profile", cfg.to_json());
        std::cout << "wrote profile.csv and per-language profiles\n";
        return 0;
    }
    if (command == "select") {
        geometry::ShiftArea area;
        if (area_override) {
            area = *area_override;
            area.validate(cfg.resolved_model().num_layers);
        } else {
            auto profile = clieval::profile_from_csv(default_path(profile_path, "profile.csv"));
            area = geometry::select_shift_area(profile, cfg.training.beta);
        }
        artifacts.write_json("area.json", area.to_json());
        artifacts.finalize("select", cfg.to_json());
        std::cout << "selected layers [" << area.l_to << ", " << area.l_bk << "]"
                  << (area.contiguous ? "" : " (window fallback)") << "\n";
        return 0;
    }
    if (command == "eval") {
        auto corpus = toymodel::make_parallel_corpus(cfg.corpus);
        auto params = toymodel::params_from_container(
            repstore::read_container(default_path(model_path, "model_shifcon.shfc")));
        const fs::path area_path = out / "area.json";
        std::ifstream area_file(area_path);
        if (!area_file)
            throw ConfigError("eval: missing " + area_path.string() +
                              " (run select or train first)");
        nlohmann::json area_json;
        area_file >> area_json;
        auto area = geometry::ShiftArea::from_json(area_json);
        auto table = clieval::vectors_from_container(
            repstore::read_container(default_path(vectors_path, "vectors.shfc")));
        intervention::ShiftPlan plan(corpus.dominant_name(), area, table, true);
        auto report = clieval::evaluate(params, corpus, plan, area,
                                        cfg.training.variance_threshold, cfg.training.ridge,
                                        cfg.eval, "eval", cfg.training.use_mcl);
        artifacts.write_json("report.json", report.to_json());
        artifacts.finalize("eval", cfg.to_json());
        print_report(report);
        return 0;
    }
    if (command == "ablate") {
        auto reports = clieval::run_ablate(cfg, artifacts);
        artifacts.finalize("ablate", cfg.to_json());
        std::cout << "ablation complete\n";
        for (const auto& r : reports) print_report(r);
        return 0;
    }
    if (command == "beta-sweep") {
        std::vector<double> beta_list =
            betas.empty() ? cfg.sweep_betas : parse_double_list(betas);
        auto csv = clieval::run_beta_sweep(cfg, beta_list, artifacts);
        artifacts.finalize("beta-sweep", cfg.to_json());
        std::cout << csv;
        return 0;
    }
    if (command == "export-lda") {
        auto dump = repstore::dump_from_container(
            repstore::read_container(default_path(dump_path, "activations_stage1.shfc")));
        const std::vector<int> comps =
            components.empty() ? std::vector<int>{1, 3} : parse_int_list(components);
        auto csv = clieval::export_lda_csv(dump, layer, comps, cfg.training.pooling);
        artifacts.write_text("lda_layer" + std::to_string(layer) + ".csv", csv);
        artifacts.finalize("export-lda", cfg.to_json());
        std::cout << "wrote lda_layer" << layer << ".csv\n";
        return 0;
    }
    throw ConfigError("unknown command '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"shifcon: shift-based multilingual contrastive training at desk scale"};
    app.require_subcommand(1);

    GlobalOptions opts;
    std::string model_path, dump_path, vectors_path, profile_path, components, betas;
    std::string split = "calibration";
    int layer = 1;

    app.add_option("--config", opts.config_path, "JSON configuration file");
    app.add_option("--out", opts.out_dir, "output directory (default: out)");
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "seed override for corpus and training");
    double beta_value = 0.0;
    auto* beta_opt = app.add_option("--beta", beta_value, "layer-selection ratio override");
    app.add_option("--layers", opts.layers, "manual shift area override as L_to:L_bk");

    auto add = [&](const char* name, const char* desc) { return app.add_subcommand(name, desc); };
    add("pipeline", "full run: corpus, two-stage training, diagnostics, evaluation");
    add("train", "two-stage training with all intermediate artifacts");
    auto* cmd_dump = add("dump", "dump per-layer activations for a trained model");
    cmd_dump->add_option("--model", model_path, "model checkpoint (.shfc)");
    cmd_dump->add_option("--split", split, "calibration or test")
        ->check(CLI::IsMember({"calibration", "test"}));
    auto* cmd_vectors = add("vectors", "compute per-layer language vectors from a dump");
    cmd_vectors->add_option("--dump", dump_path, "activation dump (.shfc)");
    auto* cmd_profile = add("profile", "per-layer subspace distance profiles");
    cmd_profile->add_option("--dump", dump_path, "activation dump (.shfc)");
    cmd_profile->add_option("--vectors", vectors_path, "language vector table (.shfc)");
    auto* cmd_select = add("select", "select the low-distance layer area from a profile");
    cmd_select->add_option("--profile", profile_path, "aggregate profile CSV");
    auto* cmd_eval = add("eval", "evaluate a trained model with shift hooks");
    cmd_eval->add_option("--model", model_path, "model checkpoint (.shfc)");
    cmd_eval->add_option("--vectors", vectors_path, "language vector table (.shfc)");
    add("ablate", "train and evaluate the four ablation variants");
    auto* cmd_sweep = add("beta-sweep", "stage-2 training and evaluation across beta values");
    cmd_sweep->add_option("--betas", betas, "comma-separated beta list");
    auto* cmd_lda = add("export-lda", "export LDA projections of sentence vectors to CSV");
    cmd_lda->add_option("--dump", dump_path, "activation dump (.shfc)");
    cmd_lda->add_option("--layer", layer, "1-based layer to project");
    cmd_lda->add_option("--components", components,
                        "comma-separated 1-based components (default 1,3)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (seed_opt->count() > 0) opts.seed = seed_value;
    if (beta_opt->count() > 0) opts.beta = beta_value;

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return dispatch(command, opts, model_path, dump_path, vectors_path, profile_path, split,
                        layer, components, betas);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error in '" << command << "': " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error in '" << command << "': " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error in '" << command << "': " << e.what() << "\n";
        return 1;
    }
}
