#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shifcon/common.hpp"
#include "shifcon/matrix.hpp"
#include "shifcon/repstore.hpp"
#include "shifcon/tokens.hpp"

namespace shifcon::toymodel {

using numkit::Matrix;
using numkit::Vec;

struct ModelConfig {
    int num_layers = 8;
    int hidden_dim = 32;
    int num_heads = 2;
    int vocab_size = 0;
    int max_seq_len = 16;
    double init_std = 0.08;

    void validate() const {
        if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || vocab_size < 1 || max_seq_len < 1)
            throw ConfigError("model: all dimensions must be positive");
        if (hidden_dim % num_heads != 0)
            throw ConfigError("model: hidden_dim must be divisible by num_heads");
    }

    nlohmann::json to_json() const {
        return {{"num_layers", num_layers},   {"hidden_dim", hidden_dim},
                {"num_heads", num_heads},     {"vocab_size", vocab_size},
                {"max_seq_len", max_seq_len}, {"init_std", init_std}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.num_layers = j.at("num_layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.init_std = j.value("init_std", 0.08);
        return c;
    }
};

struct LayerNormParams {
    Vec gamma, beta;
};

struct BlockParams {
    LayerNormParams ln1, ln2;
    Matrix wq, wk, wv, wo;  // d x d
    Vec bq, bk, bv, bo;
    Matrix w_up, w_down;  // d x 4d, 4d x d
    Vec b_up, b_down;
};

/// Pre-norm decoder-only transformer with learned positional embeddings.
/// "Hidden state at layer i" means the post-residual output of block i
/// (1-based), after any hook registered there.
struct ToyModelParams {
    ModelConfig config;
    std::uint64_t init_seed = 0;
    Matrix tok_embed;  // V x d
    Matrix pos_embed;  // max_seq_len x d
    std::vector<BlockParams> blocks;
    LayerNormParams final_norm;
    Matrix w_head;  // d x V
    Vec b_head;     // V

    /// Stable name -> storage mapping over every trainable tensor.
    std::vector<std::pair<std::string, std::vector<double>*>> tensors() {
        std::vector<std::pair<std::string, std::vector<double>*>> out;
        out.push_back({"tok_embed", &tok_embed.data});
        out.push_back({"pos_embed", &pos_embed.data});
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            auto& blk = blocks[b];
            out.push_back({p + "ln1.gamma", &blk.ln1.gamma});
            out.push_back({p + "ln1.beta", &blk.ln1.beta});
            out.push_back({p + "attn.wq", &blk.wq.data});
            out.push_back({p + "attn.bq", &blk.bq});
            out.push_back({p + "attn.wk", &blk.wk.data});
            out.push_back({p + "attn.bk", &blk.bk});
            out.push_back({p + "attn.wv", &blk.wv.data});
            out.push_back({p + "attn.bv", &blk.bv});
            out.push_back({p + "attn.wo", &blk.wo.data});
            out.push_back({p + "attn.bo", &blk.bo});
            out.push_back({p + "ln2.gamma", &blk.ln2.gamma});
            out.push_back({p + "ln2.beta", &blk.ln2.beta});
            out.push_back({p + "mlp.w_up", &blk.w_up.data});
            out.push_back({p + "mlp.b_up", &blk.b_up});
            out.push_back({p + "mlp.w_down", &blk.w_down.data});
            out.push_back({p + "mlp.b_down", &blk.b_down});
        }
        out.push_back({"final_norm.gamma", &final_norm.gamma});
        out.push_back({"final_norm.beta", &final_norm.beta});
        out.push_back({"head.w", &w_head.data});
        out.push_back({"head.b", &b_head});
        return out;
    }

    std::vector<std::pair<std::string, const std::vector<double>*>> tensors() const {
        auto mut = const_cast<ToyModelParams*>(this)->tensors();
        std::vector<std::pair<std::string, const std::vector<double>*>> out;
        out.reserve(mut.size());
        for (auto& [name, ptr] : mut) out.push_back({name, ptr});
        return out;
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, ptr] : tensors()) {
            (void)name;
            n += ptr->size();
        }
        return n;
    }

    bool all_finite() const {
        for (const auto& [name, ptr] : tensors()) {
            (void)name;
            for (double v : *ptr)
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, ptr] : tensors()) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(std::span<const double>(ptr->data(), ptr->size()), h);
        }
        return h;
    }
};

/// Same-shape parameter container filled with zeros (gradient accumulator).
inline ToyModelParams zeros_like(const ToyModelParams& p) {
    ToyModelParams z = p;
    for (auto& [name, ptr] : z.tensors()) {
        (void)name;
        std::fill(ptr->begin(), ptr->end(), 0.0);
    }
    return z;
}

/// Deterministic initialization: Gaussian(0, init_std) weights, zero biases,
/// unit layer-norm gains.
inline ToyModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.hidden_dim);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto hidden = 4 * d;

    ToyModelParams p;
    p.config = config;
    p.init_seed = seed;
    p.tok_embed = Matrix(v, d);
    p.pos_embed = Matrix(static_cast<std::size_t>(config.max_seq_len), d);
    p.blocks.resize(static_cast<std::size_t>(config.num_layers));
    for (auto& blk : p.blocks) {
        blk.ln1 = {Vec(d, 1.0), Vec(d, 0.0)};
        blk.ln2 = {Vec(d, 1.0), Vec(d, 0.0)};
        blk.wq = Matrix(d, d);
        blk.wk = Matrix(d, d);
        blk.wv = Matrix(d, d);
        blk.wo = Matrix(d, d);
        blk.bq = Vec(d, 0.0);
        blk.bk = Vec(d, 0.0);
        blk.bv = Vec(d, 0.0);
        blk.bo = Vec(d, 0.0);
        blk.w_up = Matrix(d, hidden);
        blk.w_down = Matrix(hidden, d);
        blk.b_up = Vec(hidden, 0.0);
        blk.b_down = Vec(d, 0.0);
    }
    p.final_norm = {Vec(d, 1.0), Vec(d, 0.0)};
    p.w_head = Matrix(d, v);
    p.b_head = Vec(v, 0.0);

    Rng rng(splitmix64(seed ^ 0x5113f0c0ffee5117ull));
    for (auto& [name, ptr] : p.tensors()) {
        const bool is_weight = name == "tok_embed" || name == "pos_embed" ||
                               name.find(".w") != std::string::npos ||
                               name == "head.w";
        if (!is_weight) continue;
        for (double& x : *ptr) x = config.init_std * rng.normal();
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward pass with hooks
// ---------------------------------------------------------------------------

/// A transform applied in place to the hidden states right after block
/// `layer` (1-based) finishes, before they feed the next block or the head.
struct Hook {
    int layer = 0;
    std::function<void(Matrix&)> apply;
    std::string label;
};

struct BlockCache {
    Matrix ln1_in;
    Vec ln1_mean, ln1_rstd;
    Matrix ln1_out;
    Matrix q, k, v;
    std::vector<Matrix> attn_probs;  // per head, T x T, causal rows
    Matrix attn_ctx;                 // heads concatenated, before wo
    Matrix resid_mid;                // ln1_in + attention output
    Vec ln2_mean, ln2_rstd;
    Matrix ln2_out;
    Matrix mlp_pre, mlp_act;
};

/// Everything the forward pass computed: the effective (post-hook) stream
/// per layer, pre/post states at hooked layers, an application log, logits,
/// and the intermediates the backward pass needs.
struct ForwardTrace {
    std::vector<int> tokens;
    std::vector<Matrix> layers;  // layers[i] = hidden state of layer i+1
    std::map<int, std::pair<Matrix, Matrix>> hooked;  // layer -> (pre, post)
    std::vector<std::string> applied_hooks;
    Matrix logits;  // T x V

    std::vector<BlockCache> block_cache;
    Vec fn_mean, fn_rstd;
    Matrix fn_out;

    const Matrix& layer_state(int layer) const {
        if (layer < 1 || layer > static_cast<int>(layers.size()))
            throw LookupError("trace has no layer " + std::to_string(layer));
        return layers[static_cast<std::size_t>(layer) - 1];
    }
};

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399460599343818684;
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

constexpr double kLnEps = 1e-5;

// y = gamma * (x - mean) / sqrt(var + eps) + beta rowwise; records mean and
// reciprocal stddev for the backward pass.
inline Matrix layernorm(const Matrix& x, const LayerNormParams& ln, Vec& means, Vec& rstds) {
    const std::size_t t = x.rows, d = x.cols;
    Matrix y(t, d);
    means.resize(t);
    rstds.resize(t);
    for (std::size_t i = 0; i < t; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        means[i] = mean;
        rstds[i] = rstd;
        for (std::size_t j = 0; j < d; ++j)
            y(i, j) = ln.gamma[j] * (x(i, j) - mean) * rstd + ln.beta[j];
    }
    return y;
}

// x * w + b with w (d_in x d_out), b (d_out)
inline Matrix affine(const Matrix& x, const Matrix& w, const Vec& b) {
    Matrix y = numkit::matmul(x, w);
    for (std::size_t i = 0; i < y.rows; ++i)
        for (std::size_t j = 0; j < y.cols; ++j) y(i, j) += b[j];
    return y;
}

}  // namespace detail

/// Causal forward pass over one token sequence. Hooks fire in list order at
/// their layer; a hook must preserve the (T x d) shape of the states.
inline ForwardTrace forward_with_hooks(const ToyModelParams& params,
                                       const std::vector<int>& tokens,
                                       const std::vector<Hook>& hooks = {}) {
    const auto& cfg = params.config;
    if (tokens.empty()) throw InvalidInputError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw InvalidInputError("forward: sequence longer than max_seq_len");
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab_size)
            throw InvalidInputError("forward: token id " + std::to_string(tok) +
                                    " outside the vocabulary");
    for (const auto& h : hooks) {
        if (h.layer < 1 || h.layer > cfg.num_layers)
            throw InvalidInputError("forward: hook layer " + std::to_string(h.layer) +
                                    " outside 1.." + std::to_string(cfg.num_layers));
        if (!h.apply) throw InvalidInputError("forward: hook without a transform");
    }

    const std::size_t t = tokens.size();
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto heads = static_cast<std::size_t>(cfg.num_heads);
    const std::size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardTrace trace;
    trace.tokens = tokens;

    Matrix x(t, d);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
            x(i, j) = params.tok_embed(static_cast<std::size_t>(tokens[i]), j) + params.pos_embed(i, j);

    for (int layer = 1; layer <= cfg.num_layers; ++layer) {
        const auto& blk = params.blocks[static_cast<std::size_t>(layer) - 1];
        BlockCache cache;
        cache.ln1_in = x;
        cache.ln1_out = detail::layernorm(x, blk.ln1, cache.ln1_mean, cache.ln1_rstd);
        cache.q = detail::affine(cache.ln1_out, blk.wq, blk.bq);
        cache.k = detail::affine(cache.ln1_out, blk.wk, blk.bk);
        cache.v = detail::affine(cache.ln1_out, blk.wv, blk.bv);

        cache.attn_ctx = Matrix(t, d);
        cache.attn_probs.assign(heads, Matrix(t, t));
        for (std::size_t h = 0; h < heads; ++h) {
            Matrix& probs = cache.attn_probs[h];
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < t; ++i) {
                double max_score = -1e300;
                Vec scores(i + 1);
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < dh; ++a)
                        s += cache.q(i, off + a) * cache.k(j, off + a);
                    scores[j] = s * inv_sqrt_dh;
                    max_score = std::max(max_score, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - max_score);
                    z += scores[j];
                }
                for (std::size_t j = 0; j <= i; ++j) probs(i, j) = scores[j] / z;
                for (std::size_t a = 0; a < dh; ++a) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) acc += probs(i, j) * cache.v(j, off + a);
                    cache.attn_ctx(i, off + a) = acc;
                }
            }
        }
        Matrix attn_out = detail::affine(cache.attn_ctx, blk.wo, blk.bo);
        cache.resid_mid = x;
        for (std::size_t i = 0; i < t * d; ++i) cache.resid_mid.data[i] += attn_out.data[i];

        cache.ln2_out = detail::layernorm(cache.resid_mid, blk.ln2, cache.ln2_mean, cache.ln2_rstd);
        cache.mlp_pre = detail::affine(cache.ln2_out, blk.w_up, blk.b_up);
        cache.mlp_act = cache.mlp_pre;
        for (double& vmid : cache.mlp_act.data) vmid = detail::gelu(vmid);
        Matrix mlp_out = detail::affine(cache.mlp_act, blk.w_down, blk.b_down);

        x = cache.resid_mid;
        for (std::size_t i = 0; i < t * d; ++i) x.data[i] += mlp_out.data[i];
        trace.block_cache.push_back(std::move(cache));

        bool layer_hooked = false;
        for (const auto& h : hooks) {
            if (h.layer != layer) continue;
            if (!layer_hooked) trace.hooked[layer].first = x;  // pre-hook state
            layer_hooked = true;
            h.apply(x);
            if (x.rows != t || x.cols != d)
                throw InvalidInputError("forward: hook at layer " + std::to_string(layer) +
                                        " changed the hidden-state shape");
            trace.applied_hooks.push_back(std::to_string(layer) + ":" + h.label);
        }
        if (layer_hooked) trace.hooked[layer].second = x;
        trace.layers.push_back(x);
    }

    trace.fn_out = detail::layernorm(x, params.final_norm, trace.fn_mean, trace.fn_rstd);
    trace.logits = detail::affine(trace.fn_out, params.w_head, params.b_head);
    return trace;
}

/// Greedy decoding. Hooks are re-applied on every forward pass, including
/// each incremental step. Returns only the generated tokens (the terminal
/// EOS included when emitted). Stops at EOS, max_tokens, or the context
/// limit, whichever comes first.
inline std::vector<int> generate(const ToyModelParams& params, const std::vector<int>& prompt,
                                 const std::vector<Hook>& hooks, int max_tokens) {
    if (prompt.empty()) throw InvalidInputError("generate: empty prompt");
    std::vector<int> sequence = prompt;
    std::vector<int> generated;
    for (int step = 0; step < max_tokens; ++step) {
        if (static_cast<int>(sequence.size()) >= params.config.max_seq_len) break;
        ForwardTrace trace = forward_with_hooks(params, sequence, hooks);
        const auto last = trace.logits.row(trace.logits.rows - 1);
        int best = 0;
        for (std::size_t j = 1; j < last.size(); ++j)
            if (last[j] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
        sequence.push_back(best);
        generated.push_back(best);
        if (best == TokenScheme::kEos) break;
    }
    return generated;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (reuses the .shfc container)
// ---------------------------------------------------------------------------

inline repstore::Container params_to_container(const ToyModelParams& params) {
    if (!params.all_finite())
        throw InvalidInputError("checkpoint: refusing to write non-finite weights");
    repstore::Container c;
    c.kind = "model";
    c.meta["config"] = params.config.to_json();
    c.meta["init_seed"] = params.init_seed;
    for (const auto& [name, ptr] : params.tensors()) {
        Matrix m(1, ptr->size());
        std::copy(ptr->begin(), ptr->end(), m.data.begin());
        c.blocks.push_back({name, std::move(m)});
    }
    return c;
}

inline ToyModelParams params_from_container(const repstore::Container& c) {
    if (c.kind != "model") throw FormatError("container kind '" + c.kind + "' is not a model");
    ModelConfig cfg;
    std::uint64_t seed = 0;
    try {
        cfg = ModelConfig::from_json(c.meta.at("config"));
        seed = c.meta.at("init_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model metadata is malformed: ") + e.what());
    }
    ToyModelParams p = init_params(cfg, seed);
    for (auto& [name, ptr] : p.tensors()) {
        const Matrix& m = c.block(name);
        if (m.data.size() != ptr->size())
            throw FormatError("model tensor '" + name + "' has unexpected size");
        std::copy(m.data.begin(), m.data.end(), ptr->begin());
    }
    return p;
}

}  // namespace shifcon::toymodel
