#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "shifcon/common.hpp"
#include "shifcon/matrix.hpp"

namespace shifcon::repstore {

using numkit::Matrix;
using numkit::Vec;

// ---------------------------------------------------------------------------
// ".shfc" container, format version 1.
//
//   offset 0   magic "SHFC"
//   offset 4   u16 LE format version (= 1)
//   offset 6   u64 LE header length H
//   offset 14  H bytes of UTF-8 JSON:
//              {"kind": ..., "meta": {...},
//               "blocks": [{"name","rows","cols","offset"}, ...]}
//   offset 14+H  payload: per block, rows*cols f64 LE row-major values,
//                at block.offset bytes from the payload start.
//
// Activation dumps, model checkpoints, corpora and vector tables all reuse
// this container with different "kind" values.
// ---------------------------------------------------------------------------

constexpr char kMagic[4] = {'S', 'H', 'F', 'C'};
constexpr std::uint16_t kFormatVersion = 1;

struct TensorBlock {
    std::string name;
    Matrix data;
};

struct Container {
    std::string kind;
    nlohmann::json meta;
    std::vector<TensorBlock> blocks;

    const Matrix& block(const std::string& name) const {
        for (const auto& b : blocks)
            if (b.name == name) return b.data;
        throw LookupError("container has no block named '" + name + "'");
    }
};

namespace detail {

inline void put_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64le(std::string& out, double d) {
    put_u64le(out, std::bit_cast<std::uint64_t>(d));
}

inline std::uint16_t get_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint64_t get_u64le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline double get_f64le(const unsigned char* p) {
    return std::bit_cast<double>(get_u64le(p));
}

}  // namespace detail

inline void write_container(const Container& c, const std::filesystem::path& path) {
    nlohmann::json header;
    header["kind"] = c.kind;
    header["meta"] = c.meta;
    header["blocks"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& b : c.blocks) {
        header["blocks"].push_back({{"name", b.name},
                                    {"rows", b.data.rows},
                                    {"cols", b.data.cols},
                                    {"offset", offset}});
        offset += static_cast<std::uint64_t>(b.data.rows) * b.data.cols * sizeof(double);
    }
    const std::string header_str = header.dump();

    std::string out;
    out.reserve(14 + header_str.size() + offset);
    out.append(kMagic, 4);
    detail::put_u16le(out, kFormatVersion);
    detail::put_u64le(out, header_str.size());
    out += header_str;
    for (const auto& b : c.blocks)
        for (double v : b.data.data) detail::put_f64le(out, v);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("'" + path.string() + "' does not start with the SHFC magic");
    if (bytes.size() < 14)
        throw CorruptionError("'" + path.string() + "' truncated inside the preamble", bytes.size());
    const std::uint16_t version = detail::get_u16le(bytes.data() + 4);
    if (version != kFormatVersion)
        throw FormatError("'" + path.string() + "' has unsupported format version " +
                          std::to_string(version));
    const std::uint64_t header_len = detail::get_u64le(bytes.data() + 6);
    if (14 + header_len > bytes.size())
        throw CorruptionError("'" + path.string() + "' truncated inside the header", bytes.size());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 14, bytes.begin() + 14 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' header is not valid JSON: " + e.what());
    }

    Container c;
    const std::uint64_t payload_base = 14 + header_len;
    const std::uint64_t payload_size = bytes.size() - payload_base;
    try {
        c.kind = header.at("kind").get<std::string>();
        c.meta = header.value("meta", nlohmann::json::object());
        for (const auto& jb : header.at("blocks")) {
            TensorBlock b;
            b.name = jb.at("name").get<std::string>();
            const auto rows = jb.at("rows").get<std::uint64_t>();
            const auto cols = jb.at("cols").get<std::uint64_t>();
            const auto offset = jb.at("offset").get<std::uint64_t>();
            const std::uint64_t nbytes = rows * cols * sizeof(double);
            if (offset > payload_size || nbytes > payload_size - offset)
                throw CorruptionError("'" + path.string() + "' truncated inside block '" + b.name +
                                          "'",
                                      payload_base + std::min<std::uint64_t>(offset, payload_size));
            b.data = Matrix(rows, cols);
            const unsigned char* p = bytes.data() + payload_base + offset;
            for (std::size_t i = 0; i < b.data.data.size(); ++i)
                b.data.data[i] = detail::get_f64le(p + i * sizeof(double));
            c.blocks.push_back(std::move(b));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' header is malformed: " + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolingMethod { Mean, Max, Last };

inline std::string pooling_name(PoolingMethod m) {
    switch (m) {
        case PoolingMethod::Mean: return "mean";
        case PoolingMethod::Max: return "max";
        case PoolingMethod::Last: return "last";
    }
    throw InvalidInputError("unknown pooling method");
}

inline PoolingMethod parse_pooling(const std::string& s) {
    if (s == "mean") return PoolingMethod::Mean;
    if (s == "max") return PoolingMethod::Max;
    if (s == "last") return PoolingMethod::Last;
    throw ConfigError("unknown pooling method '" + s + "' (expected mean, max or last)");
}

/// Collapse a token matrix (n_tokens x d) to a single d-vector.
inline Vec pool(const Matrix& tokens, PoolingMethod method) {
    if (tokens.rows == 0) throw InvalidInputError("pool: empty token matrix");
    switch (method) {
        case PoolingMethod::Mean: return numkit::column_mean(tokens);
        case PoolingMethod::Max: {
            Vec out(tokens.row(0).begin(), tokens.row(0).end());
            for (std::size_t i = 1; i < tokens.rows; ++i)
                for (std::size_t j = 0; j < tokens.cols; ++j)
                    out[j] = std::max(out[j], tokens(i, j));
            return out;
        }
        case PoolingMethod::Last: {
            auto r = tokens.row(tokens.rows - 1);
            return Vec(r.begin(), r.end());
        }
    }
    throw InvalidInputError("pool: unknown method");
}

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

/// Per-language, per-layer token representations plus sentence boundaries.
/// Layer indices are 1-based everywhere in the public API; `layers[i]` holds
/// layer i+1. Sentence offsets are cumulative end positions into the token
/// rows, shared by all layers of a language.
struct ActivationDump {
    std::string model_id;
    int num_layers = 0;
    int hidden_dim = 0;
    std::vector<std::string> languages;

    struct LanguageActivations {
        std::vector<std::uint64_t> sentence_offsets;
        std::vector<Matrix> layers;
    };
    std::map<std::string, LanguageActivations> per_language;

    std::size_t num_sentences(const std::string& language) const {
        return activations(language).sentence_offsets.size();
    }

    const LanguageActivations& activations(const std::string& language) const {
        auto it = per_language.find(language);
        if (it == per_language.end()) throw LookupError("dump has no language '" + language + "'");
        return it->second;
    }

    const Matrix& layer_matrix(const std::string& language, int layer) const {
        const auto& acts = activations(language);
        if (layer < 1 || layer > num_layers)
            throw LookupError("layer " + std::to_string(layer) + " outside 1.." +
                              std::to_string(num_layers));
        return acts.layers[static_cast<std::size_t>(layer) - 1];
    }

    void validate() const {
        if (num_layers < 1 || hidden_dim < 1)
            throw InvalidInputError("dump: num_layers and hidden_dim must be positive");
        if (languages.empty()) throw InvalidInputError("dump: no languages");
        if (languages.size() != per_language.size())
            throw InvalidInputError("dump: language list and activation blocks disagree");
        for (const auto& lang : languages) {
            const auto it = per_language.find(lang);
            if (it == per_language.end())
                throw InvalidInputError("dump: language '" + lang + "' missing from blocks");
            const auto& acts = it->second;
            if (acts.layers.size() != static_cast<std::size_t>(num_layers))
                throw InvalidInputError("dump: language '" + lang + "' does not cover all " +
                                        std::to_string(num_layers) + " layers");
            if (acts.sentence_offsets.empty())
                throw InvalidInputError("dump: language '" + lang + "' has no sentences");
            for (std::size_t i = 0; i < acts.sentence_offsets.size(); ++i) {
                const std::uint64_t prev = i == 0 ? 0 : acts.sentence_offsets[i - 1];
                if (acts.sentence_offsets[i] <= prev)
                    throw InvalidInputError("dump: sentence offsets for '" + lang +
                                            "' are not strictly increasing");
            }
            for (const auto& m : acts.layers) {
                if (m.cols != static_cast<std::size_t>(hidden_dim))
                    throw InvalidInputError("dump: matrix for '" + lang + "' has cols != hidden_dim");
                if (m.rows != acts.sentence_offsets.back())
                    throw InvalidInputError("dump: matrix rows for '" + lang +
                                            "' disagree with the last sentence offset");
                if (!m.all_finite())
                    throw InvalidInputError("dump: non-finite activation for '" + lang + "'");
            }
        }
    }
};

inline Container dump_to_container(const ActivationDump& dump) {
    dump.validate();
    Container c;
    c.kind = "activations";
    c.meta["model_id"] = dump.model_id;
    c.meta["num_layers"] = dump.num_layers;
    c.meta["hidden_dim"] = dump.hidden_dim;
    c.meta["languages"] = dump.languages;
    nlohmann::json offs = nlohmann::json::object();
    for (const auto& lang : dump.languages)
        offs[lang] = dump.activations(lang).sentence_offsets;
    c.meta["sentence_offsets"] = offs;
    for (const auto& lang : dump.languages) {
        const auto& acts = dump.activations(lang);
        for (int layer = 1; layer <= dump.num_layers; ++layer)
            c.blocks.push_back({lang + "/" + std::to_string(layer),
                                acts.layers[static_cast<std::size_t>(layer) - 1]});
    }
    return c;
}

inline ActivationDump dump_from_container(const Container& c) {
    if (c.kind != "activations")
        throw FormatError("container kind '" + c.kind + "' is not an activation dump");
    ActivationDump dump;
    try {
        dump.model_id = c.meta.at("model_id").get<std::string>();
        dump.num_layers = c.meta.at("num_layers").get<int>();
        dump.hidden_dim = c.meta.at("hidden_dim").get<int>();
        dump.languages = c.meta.at("languages").get<std::vector<std::string>>();
        for (const auto& lang : dump.languages) {
            ActivationDump::LanguageActivations acts;
            acts.sentence_offsets =
                c.meta.at("sentence_offsets").at(lang).get<std::vector<std::uint64_t>>();
            for (int layer = 1; layer <= dump.num_layers; ++layer)
                acts.layers.push_back(c.block(lang + "/" + std::to_string(layer)));
            dump.per_language[lang] = std::move(acts);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("activation dump metadata is malformed: ") + e.what());
    }
    dump.validate();
    return dump;
}

inline void write_dump(const ActivationDump& dump, const std::filesystem::path& path) {
    write_container(dump_to_container(dump), path);
}

inline ActivationDump read_dump(const std::filesystem::path& path) {
    return dump_from_container(read_container(path));
}

/// One pooled vector per sentence at the given language/layer
/// (num_sentences x d).
inline Matrix sentence_vectors(const ActivationDump& dump, const std::string& language, int layer,
                               PoolingMethod method) {
    const auto& acts = dump.activations(language);
    const Matrix& tokens = dump.layer_matrix(language, layer);
    Matrix out(acts.sentence_offsets.size(), tokens.cols);
    std::uint64_t start = 0;
    for (std::size_t s = 0; s < acts.sentence_offsets.size(); ++s) {
        const std::uint64_t end = acts.sentence_offsets[s];
        Matrix sent(end - start, tokens.cols);
        std::copy(tokens.data.begin() + static_cast<std::ptrdiff_t>(start * tokens.cols),
                  tokens.data.begin() + static_cast<std::ptrdiff_t>(end * tokens.cols),
                  sent.data.begin());
        Vec pooled = pool(sent, method);
        std::copy(pooled.begin(), pooled.end(), out.row(s).begin());
        start = end;
    }
    return out;
}

}  // namespace shifcon::repstore
