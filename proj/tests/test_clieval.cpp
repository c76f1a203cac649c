#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "shifcon/eval.hpp"
#include "shifcon/pipeline.hpp"
#include "test_util.hpp"

using namespace shifcon;
using namespace shifcon::clieval;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config_json() {
    return {
        {"corpus",
         {{"num_languages", 3},
          {"num_concepts", 12},
          {"data_shares", {0.7, 0.15, 0.15}},
          {"min_sentence_len", 3},
          {"max_sentence_len", 6},
          {"train_sentences", 240},
          {"calibration_sentences", 24},
          {"test_sentences", 12},
          {"transition_seed", 5}}},
        {"model",
         {{"num_layers", 4}, {"hidden_dim", 12}, {"num_heads", 2}, {"max_seq_len", 16}}},
        {"training",
         {{"stage1_steps", 30},
          {"stage2_steps", 15},
          {"batch_size", 8},
          {"mcl_batch_size", 4},
          {"learning_rate", 0.3},
          {"beta", 0.5},
          {"seed", 11}}},
        {"eval", {{"prompt_tokens", 2}, {"max_generate", 8}}},
    };
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("shifcon_clieval_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("language consistency fractions and the 90 percent rule", "[clieval]") {
    toymodel::TokenScheme scheme{2, 16};
    auto tok = [&](int lang, int concept_id) { return scheme.encode(lang, concept_id); };

    // all tokens in the query language
    std::vector<std::vector<int>> all_good = {{tok(0, 1), tok(0, 2), toymodel::TokenScheme::kEos}};
    CHECK(language_consistency(all_good, 0, scheme) == 1.0);

    // half the sequences fully in the wrong language
    std::vector<std::vector<int>> half = {{tok(0, 1), tok(0, 2)}, {tok(1, 1), tok(1, 2)}};
    CHECK(language_consistency(half, 0, scheme) == 0.5);

    // 8 of 10 content tokens correct: below the 0.9 threshold
    std::vector<int> eight_of_ten;
    for (int i = 0; i < 8; ++i) eight_of_ten.push_back(tok(0, i));
    eight_of_ten.push_back(tok(1, 1));
    eight_of_ten.push_back(tok(1, 2));
    CHECK(language_consistency({eight_of_ten}, 0, scheme) == 0.0);

    // 9 of 10 passes
    std::vector<int> nine_of_ten;
    for (int i = 0; i < 9; ++i) nine_of_ten.push_back(tok(0, i));
    nine_of_ten.push_back(tok(1, 0));
    CHECK(language_consistency({nine_of_ten}, 0, scheme) == 1.0);

    // EOS-only output has no content tokens: inconsistent
    CHECK(language_consistency({{toymodel::TokenScheme::kEos}}, 0, scheme) == 0.0);

    CHECK_THROWS_AS(language_consistency({}, 0, scheme), InvalidInputError);
}

TEST_CASE("config parsing defaults and strictness", "[clieval]") {
    auto cfg = parse_config(nlohmann::json::object());
    CHECK(cfg.corpus.num_languages == 4);
    CHECK(cfg.training.beta == 0.3);
    CHECK(cfg.training.tau == 0.05);
    CHECK(cfg.resolved_model().vocab_size == 3 + 4 * 64);

    CHECK_THROWS_AS(parse_config({{"trainin", {{"alpha", 1.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"training", {{"alhpa", 1.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"training", {{"beta", 2.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"corpus", {{"data_shares", {0.5, 0.5}}}}}), ConfigError);
}

TEST_CASE("profile csv serialization round-trips", "[clieval]") {
    geometry::DistanceProfile profile;
    profile.layer_distances = {3.5, 1.25, 0.75, 9.0};
    const std::string csv = profile_csv(profile);
    auto dir = temp_dir("profile");
    fs::create_directories(dir);
    {
        std::ofstream f(dir / "p.csv");
        f << csv;
    }
    auto back = profile_from_csv(dir / "p.csv");
    REQUIRE(back.layer_distances.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(back.layer_distances[i] == profile.layer_distances[i]);
    fs::remove_all(dir);
}

TEST_CASE("vector table container round-trips", "[clieval]") {
    Rng rng(71);
    geometry::LanguageVectorTable table;
    table.languages = {"L0", "L1"};
    table.num_layers = 3;
    table.dim = 5;
    for (const auto& lang : table.languages) {
        std::vector<numkit::Vec> per_layer;
        for (int i = 0; i < 3; ++i) per_layer.push_back(testutil::random_vec(rng, 5));
        table.vectors[lang] = per_layer;
    }
    auto c = vectors_to_container(table, repstore::PoolingMethod::Mean);
    auto back = vectors_from_container(c);
    CHECK(back.checksum() == table.checksum());
}

TEST_CASE("lda export separates synthetic languages", "[clieval]") {
    // two well-separated "languages" faked directly as activation clouds
    Rng rng(73);
    repstore::ActivationDump dump;
    dump.model_id = "lda-test";
    dump.num_layers = 1;
    dump.hidden_dim = 4;
    dump.languages = {"La", "Lb"};
    for (int l = 0; l < 2; ++l) {
        repstore::ActivationDump::LanguageActivations acts;
        numkit::Matrix m(40, 4);
        for (std::size_t i = 0; i < 40; ++i) {
            m(i, 0) = (l == 0 ? 0.0 : 6.0) + 0.4 * rng.normal();
            for (std::size_t j = 1; j < 4; ++j) m(i, j) = 0.4 * rng.normal();
        }
        for (std::size_t s = 1; s <= 20; ++s) acts.sentence_offsets.push_back(2 * s);
        acts.layers.push_back(std::move(m));
        dump.per_language[l == 0 ? "La" : "Lb"] = std::move(acts);
    }
    dump.validate();

    const std::string csv = export_lda_csv(dump, 1, {1});
    std::istringstream stream(csv);
    std::string header;
    std::getline(stream, header);
    CHECK(header == "sample_id,language,comp_1");

    // between-class gap must dominate within-class spread
    std::map<std::string, std::vector<double>> values;
    std::string line;
    while (std::getline(stream, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        values[line.substr(c1 + 1, c2 - c1 - 1)].push_back(std::stod(line.substr(c2 + 1)));
    }
    REQUIRE(values.size() == 2);
    auto mean_of = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        return m / static_cast<double>(v.size());
    };
    const double ma = mean_of(values.at("La"));
    const double mb = mean_of(values.at("Lb"));
    double spread = 0.0;
    for (const auto& [lang, v] : values) {
        const double mu = lang == "La" ? ma : mb;
        for (double x : v) spread += (x - mu) * (x - mu);
    }
    spread = std::sqrt(spread / 40.0);
    CHECK(std::abs(ma - mb) > spread);

    // rank bound: a 2-class fit has one discriminant
    CHECK_THROWS_AS(export_lda_csv(dump, 1, {1, 3}), Error);
}

TEST_CASE("pipeline smoke run populates every report field and is deterministic", "[clieval]") {
    auto cfg = parse_config(tiny_config_json());
    auto dir1 = temp_dir("pipe1");
    auto dir2 = temp_dir("pipe2");

    ArtifactSet a1{dir1};
    auto outcome1 = run_pipeline(cfg, a1);
    a1.finalize("pipeline", cfg.to_json());

    for (const auto* report : {&outcome1.stage1, &outcome1.shifcon}) {
        CHECK(report->next_token_accuracy.size() == 3);
        CHECK(report->language_consistency.size() == 3);
        for (const auto& [lang, acc] : report->next_token_accuracy) {
            CHECK(acc >= 0.0);
            CHECK(acc <= 1.0);
        }
        for (const auto& [lang, cons] : report->language_consistency) {
            CHECK(cons >= 0.0);
            CHECK(cons <= 1.0);
        }
        CHECK(report->mean_area_distance >= 0.0);
    }

    for (const char* artifact :
         {"corpus.shfc", "model_stage1.shfc", "model_shifcon.shfc", "activations_stage1.shfc",
          "vectors.shfc", "profile.csv", "area.json", "plan.json", "training_log.jsonl",
          "report.json", "manifest.json"})
        CHECK(fs::exists(dir1 / artifact));

    ArtifactSet a2{dir2};
    run_pipeline(cfg, a2);
    a2.finalize("pipeline", cfg.to_json());
    CHECK(slurp(dir1 / "manifest.json") == slurp(dir2 / "manifest.json"));
    CHECK(slurp(dir1 / "report.json") == slurp(dir2 / "report.json"));
    CHECK(slurp(dir1 / "training_log.jsonl") == slurp(dir2 / "training_log.jsonl"));

    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("ablation trains all four variants from one stage-1 checkpoint", "[clieval]") {
    auto cfg = parse_config(tiny_config_json());
    cfg.training.stage2_steps = 8;
    auto dir = temp_dir("ablate");
    ArtifactSet artifacts{dir};
    auto reports = run_ablate(cfg, artifacts);
    artifacts.finalize("ablate", cfg.to_json());

    REQUIRE(reports.size() == 4);
    CHECK(reports[0].variant == "msft_only");
    CHECK_FALSE(reports[0].shift_enabled);
    CHECK_FALSE(reports[0].mcl_enabled);
    CHECK(reports[1].variant == "shifcon");
    CHECK(reports[1].shift_enabled);
    CHECK(reports[1].mcl_enabled);
    CHECK(reports[2].variant == "wo_shift_projection");
    CHECK_FALSE(reports[2].shift_enabled);
    CHECK(reports[2].mcl_enabled);
    CHECK(reports[3].variant == "wo_mcl");
    CHECK(reports[3].shift_enabled);
    CHECK_FALSE(reports[3].mcl_enabled);

    for (const auto& r : reports) {
        CHECK(r.next_token_accuracy.size() == 3);
        CHECK(r.language_consistency.size() == 3);
    }
    for (const char* name :
         {"model_msft_only.shfc", "model_shifcon.shfc", "model_wo_shift_projection.shfc",
          "model_wo_mcl.shfc", "ablate_report.json", "ablate.csv"})
        CHECK(fs::exists(dir / name));
    fs::remove_all(dir);
}

TEST_CASE("beta sweep emits one row per beta and keeps going on failures", "[clieval]") {
    auto cfg = parse_config(tiny_config_json());
    cfg.training.stage2_steps = 5;
    auto dir = temp_dir("sweep");
    ArtifactSet artifacts{dir};
    // 0.1 on a 4-layer model selects ceil(0.4) = 1 layer: an area-too-small row
    auto csv = run_beta_sweep(cfg, {0.1, 0.5, 1.0}, artifacts);
    artifacts.finalize("beta-sweep", cfg.to_json());

    std::istringstream stream(csv);
    std::string line;
    std::getline(stream, line);
    CHECK(line == "beta,status,nondominant_accuracy,nondominant_consistency,mean_area_distance");
    std::vector<std::string> rows;
    while (std::getline(stream, line))
        if (!line.empty()) rows.push_back(line);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].find("error") != std::string::npos);
    CHECK(rows[1].find("ok") != std::string::npos);
    CHECK(rows[2].find("ok") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("cli exit codes distinguish config errors", "[clieval][cli]") {
    const char* cli = std::getenv("SHIFCON_CLI_PATH");
    if (cli == nullptr) {
        SUCCEED("SHIFCON_CLI_PATH not set; exit-code check runs under ctest");
        return;
    }
    auto dir = temp_dir("cli");
    fs::create_directories(dir);

    // beta 0.05 on an 8-layer model: ceil(0.4) = 1 selected layer, too small
    const std::string base = std::string(cli) + " --out " + (dir / "o").string();
    const int too_small = std::system(
        (base + " --beta 0.05 --config " + (dir / "cfg.json").string() + " pipeline >/dev/null 2>&1")
            .c_str());
    // write the config first, then rerun
    {
        std::ofstream f(dir / "cfg.json");
        f << tiny_config_json().dump();
    }
    const int too_small2 = std::system(
        (base + " --beta 0.05 --config " + (dir / "cfg.json").string() + " pipeline >/dev/null 2>&1")
            .c_str());
    CHECK(WEXITSTATUS(too_small) == 2);   // missing config file
    CHECK(WEXITSTATUS(too_small2) == 2);  // area too small

    const int bad_cmd = std::system((base + " frobnicate >/dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(bad_cmd) == 2);
    fs::remove_all(dir);
}
