#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "shifcon/backprop.hpp"
#include "shifcon/common.hpp"
#include "shifcon/intervention.hpp"
#include "shifcon/matrix.hpp"
#include "shifcon/model.hpp"
#include "shifcon/repstore.hpp"
#include "shifcon/tokens.hpp"

namespace shifcon::training {

using intervention::ShiftPlan;
using numkit::Matrix;
using numkit::Vec;
using repstore::PoolingMethod;
using toymodel::ForwardTrace;
using toymodel::TokenScheme;
using toymodel::ToyModelParams;

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct MsftBatch {
    std::vector<std::vector<int>> sentences;
    std::vector<std::string> languages;  // one id per sentence
};

/// Exact translation pairs (non-dominant side, dominant side); one language
/// id per pair for the non-dominant side.
struct TranslationPairBatch {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
    std::vector<std::string> languages;
};

struct MclConfig {
    double temperature = 0.05;
    PoolingMethod pooling = PoolingMethod::Mean;
    std::vector<int> layers;  // the [L_to, L_bk) range
};

/// Receives the per-sentence pooled native-subspace states at the layers the
/// online estimator tracks (pre-hook at L_to, post-hook at L_bk).
using VectorUpdateSink = std::function<void(const std::string& language, int layer, const Vec&)>;

namespace detail {

inline std::vector<std::size_t> content_positions(const std::vector<int>& tokens,
                                                  const TokenScheme& scheme) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (!scheme.is_special(tokens[i])) out.push_back(i);
    return out;
}

inline Vec pool_rows(const Matrix& states, const std::vector<std::size_t>& rows,
                     PoolingMethod method) {
    if (rows.empty()) throw InvalidInputError("pool: sentence has no content tokens");
    Matrix sub(rows.size(), states.cols);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(states.row(rows[r]).begin(), states.row(rows[r]).end(), sub.row(r).begin());
    return repstore::pool(sub, method);
}

// Scatter d_pooled back onto the contributing rows.
inline void pool_backward(const Matrix& states, const std::vector<std::size_t>& rows,
                          PoolingMethod method, const Vec& d_pooled, Matrix& d_states) {
    switch (method) {
        case PoolingMethod::Mean: {
            const double inv = 1.0 / static_cast<double>(rows.size());
            for (std::size_t r : rows)
                for (std::size_t j = 0; j < d_pooled.size(); ++j)
                    d_states(r, j) += d_pooled[j] * inv;
            return;
        }
        case PoolingMethod::Max: {
            for (std::size_t j = 0; j < d_pooled.size(); ++j) {
                std::size_t best = rows[0];
                for (std::size_t r : rows)
                    if (states(r, j) > states(best, j)) best = r;
                d_states(best, j) += d_pooled[j];
            }
            return;
        }
        case PoolingMethod::Last: {
            const std::size_t r = rows.back();
            for (std::size_t j = 0; j < d_pooled.size(); ++j) d_states(r, j) += d_pooled[j];
            return;
        }
    }
    throw InvalidInputError("pool_backward: unknown method");
}

inline void collect_native_states(const ForwardTrace& trace, const std::vector<int>& tokens,
                                  const TokenScheme& scheme, const std::string& language,
                                  const ShiftPlan* plan, PoolingMethod pooling,
                                  const VectorUpdateSink& sink) {
    if (!sink || plan == nullptr) return;
    const auto rows = content_positions(tokens, scheme);
    const int l_to = plan->area.l_to;
    const int l_bk = plan->area.l_bk;
    const auto pre_it = trace.hooked.find(l_to);
    const Matrix& at_to =
        pre_it != trace.hooked.end() ? pre_it->second.first : trace.layer_state(l_to);
    sink(language, l_to, pool_rows(at_to, rows, pooling));
    sink(language, l_bk, pool_rows(trace.layer_state(l_bk), rows, pooling));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MSFT: autoregressive cross-entropy
// ---------------------------------------------------------------------------

/// Mean next-token cross-entropy over all predicted positions in the batch.
/// With a plan, shift hooks fire per sample language; the shift vectors are
/// constants with respect to the gradients. Pass grads to accumulate exact
/// parameter gradients.
inline double msft_loss(const ToyModelParams& params, const MsftBatch& batch,
                        const ShiftPlan* plan, ToyModelParams* grads,
                        const TokenScheme* scheme = nullptr, PoolingMethod pooling = PoolingMethod::Mean,
                        const VectorUpdateSink& sink = {}) {
    if (batch.sentences.empty()) throw InvalidInputError("msft_loss: empty batch");
    if (batch.languages.size() != batch.sentences.size())
        throw InvalidInputError("msft_loss: language ids do not match sentences");

    std::size_t total_positions = 0;
    for (const auto& s : batch.sentences) {
        if (s.size() < 2) throw InvalidInputError("msft_loss: sentence shorter than 2 tokens");
        total_positions += s.size() - 1;
    }

    double loss = 0.0;
    for (std::size_t b = 0; b < batch.sentences.size(); ++b) {
        const auto& tokens = batch.sentences[b];
        std::vector<toymodel::Hook> hooks;
        if (plan != nullptr) hooks = intervention::build_hooks(*plan, batch.languages[b]);
        ForwardTrace trace = toymodel::forward_with_hooks(params, tokens, hooks);

        const std::size_t t = tokens.size();
        const auto v = static_cast<std::size_t>(params.config.vocab_size);
        Matrix dlogits(t, v);
        for (std::size_t pos = 0; pos + 1 < t; ++pos) {
            const auto target = static_cast<std::size_t>(tokens[pos + 1]);
            double max_z = trace.logits(pos, 0);
            for (std::size_t j = 1; j < v; ++j) max_z = std::max(max_z, trace.logits(pos, j));
            double z = 0.0;
            for (std::size_t j = 0; j < v; ++j) z += std::exp(trace.logits(pos, j) - max_z);
            loss += (std::log(z) - (trace.logits(pos, target) - max_z)) /
                    static_cast<double>(total_positions);
            if (grads != nullptr) {
                for (std::size_t j = 0; j < v; ++j)
                    dlogits(pos, j) = std::exp(trace.logits(pos, j) - max_z) / z /
                                      static_cast<double>(total_positions);
                dlogits(pos, target) -= 1.0 / static_cast<double>(total_positions);
            }
        }
        if (grads != nullptr) backward_into(params, trace, &dlogits, nullptr, *grads);
        if (scheme != nullptr)
            detail::collect_native_states(trace, tokens, *scheme, batch.languages[b], plan, pooling,
                                          sink);
    }
    if (!std::isfinite(loss)) throw NumericalError("msft_loss: non-finite loss");
    return loss;
}

// ---------------------------------------------------------------------------
// MCL: per-layer InfoNCE over pooled sentence embeddings
// ---------------------------------------------------------------------------

/// InfoNCE over pooled embeddings with cosine similarity: row i of
/// `shifted` against all rows of `dominant` as candidates, positives on the
/// diagonal. Returns the batch sum (not mean). Optional gradient outputs
/// receive d loss / d embedding; gradients flow through both sides.
inline double mcl_infonce_from_embeddings(const std::vector<Vec>& shifted,
                                          const std::vector<Vec>& dominant, double temperature,
                                          std::vector<Vec>* d_shifted = nullptr,
                                          std::vector<Vec>* d_dominant = nullptr) {
    const std::size_t n = shifted.size();
    if (n == 0) throw InvalidInputError("mcl: empty batch");
    if (dominant.size() != n) throw InvalidInputError("mcl: pair count mismatch");
    if (!(temperature > 0.0)) throw InvalidInputError("mcl: temperature must be positive");

    std::vector<double> norm_s(n), norm_d(n);
    for (std::size_t i = 0; i < n; ++i) {
        norm_s[i] = numkit::norm2(shifted[i]);
        norm_d[i] = numkit::norm2(dominant[i]);
        if (!(norm_s[i] > 0.0))
            throw NumericalError("mcl: zero-norm shifted embedding at sample " + std::to_string(i));
        if (!(norm_d[i] > 0.0))
            throw NumericalError("mcl: zero-norm dominant embedding at sample " + std::to_string(i));
    }
    if (d_shifted != nullptr) d_shifted->assign(n, Vec(shifted[0].size(), 0.0));
    if (d_dominant != nullptr) d_dominant->assign(n, Vec(dominant[0].size(), 0.0));

    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Vec z(n);
        for (std::size_t j = 0; j < n; ++j)
            z[j] = numkit::dot(shifted[i], dominant[j]) / (norm_s[i] * norm_d[j] * temperature);
        double max_z = z[0];
        for (double zz : z) max_z = std::max(max_z, zz);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - max_z);
        loss += std::log(sum) - (z[i] - max_z);

        if (d_shifted == nullptr && d_dominant == nullptr) continue;
        for (std::size_t j = 0; j < n; ++j) {
            const double softmax_j = std::exp(z[j] - max_z) / sum;
            const double dz = (softmax_j - (j == i ? 1.0 : 0.0)) / temperature;
            if (dz == 0.0) continue;
            const double cos_ij = numkit::dot(shifted[i], dominant[j]) / (norm_s[i] * norm_d[j]);
            for (std::size_t a = 0; a < shifted[i].size(); ++a) {
                if (d_shifted != nullptr)
                    (*d_shifted)[i][a] += dz * (dominant[j][a] / (norm_s[i] * norm_d[j]) -
                                                cos_ij * shifted[i][a] / (norm_s[i] * norm_s[i]));
                if (d_dominant != nullptr)
                    (*d_dominant)[j][a] += dz * (shifted[i][a] / (norm_s[i] * norm_d[j]) -
                                                 cos_ij * dominant[j][a] / (norm_d[j] * norm_d[j]));
            }
        }
    }
    if (!std::isfinite(loss)) throw NumericalError("mcl: non-finite loss");
    return loss;
}

namespace detail {

struct MclResult {
    double total = 0.0;
    std::vector<double> per_layer;
};

// Shared machinery for the single-layer and full-range MCL losses: one
// forward per sequence, every requested layer's loss, one backward per
// sequence with all injected gradients. `scale` multiplies the loss and its
// gradients (alpha in the combined objective).
inline MclResult mcl_loss_layers(const ToyModelParams& params, const TranslationPairBatch& batch,
                                 const std::vector<int>& layers, const MclConfig& cfg,
                                 const ShiftPlan& plan, const TokenScheme& scheme, double scale,
                                 ToyModelParams* grads, const VectorUpdateSink& sink = {}) {
    const std::size_t n = batch.pairs.size();
    if (n == 0) throw InvalidInputError("mcl: empty batch");
    if (batch.languages.size() != n)
        throw InvalidInputError("mcl: language ids do not match pairs");
    for (int t : layers)
        if (t < 1 || t > params.config.num_layers)
            throw InvalidInputError("mcl: layer " + std::to_string(t) + " out of range");

    std::vector<ForwardTrace> traces_l, traces_d;
    std::vector<std::vector<std::size_t>> rows_l, rows_d;
    traces_l.reserve(n);
    traces_d.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& [sent_l, sent_d] = batch.pairs[i];
        auto hooks = intervention::build_hooks(plan, batch.languages[i]);
        traces_l.push_back(toymodel::forward_with_hooks(params, sent_l, hooks));
        traces_d.push_back(toymodel::forward_with_hooks(params, sent_d, {}));
        rows_l.push_back(content_positions(sent_l, scheme));
        rows_d.push_back(content_positions(sent_d, scheme));
    }

    MclResult result;
    std::vector<std::map<int, Matrix>> inject_l(n), inject_d(n);
    for (int layer : layers) {
        std::vector<Vec> emb_l(n), emb_d(n);
        for (std::size_t i = 0; i < n; ++i) {
            emb_l[i] = pool_rows(traces_l[i].layer_state(layer), rows_l[i], cfg.pooling);
            emb_d[i] = pool_rows(traces_d[i].layer_state(layer), rows_d[i], cfg.pooling);
        }
        std::vector<Vec> d_emb_l, d_emb_d;
        const double layer_loss = mcl_infonce_from_embeddings(
            emb_l, emb_d, cfg.temperature, grads != nullptr ? &d_emb_l : nullptr,
            grads != nullptr ? &d_emb_d : nullptr);
        result.per_layer.push_back(layer_loss);
        result.total += layer_loss;

        if (grads == nullptr) continue;
        for (std::size_t i = 0; i < n; ++i) {
            for (double& g : d_emb_l[i]) g *= scale;
            for (double& g : d_emb_d[i]) g *= scale;
            Matrix& gl = inject_l[i]
                             .try_emplace(layer, traces_l[i].layer_state(layer).rows,
                                          traces_l[i].layer_state(layer).cols)
                             .first->second;
            pool_backward(traces_l[i].layer_state(layer), rows_l[i], cfg.pooling, d_emb_l[i], gl);
            Matrix& gd = inject_d[i]
                             .try_emplace(layer, traces_d[i].layer_state(layer).rows,
                                          traces_d[i].layer_state(layer).cols)
                             .first->second;
            pool_backward(traces_d[i].layer_state(layer), rows_d[i], cfg.pooling, d_emb_d[i], gd);
        }
    }

    if (grads != nullptr) {
        for (std::size_t i = 0; i < n; ++i) {
            backward_into(params, traces_l[i], nullptr, &inject_l[i], *grads);
            backward_into(params, traces_d[i], nullptr, &inject_d[i], *grads);
        }
    }
    if (sink) {
        const std::string dominant = plan.dominant_language;
        for (std::size_t i = 0; i < n; ++i) {
            collect_native_states(traces_l[i], batch.pairs[i].first, scheme, batch.languages[i],
                                  &plan, cfg.pooling, sink);
            collect_native_states(traces_d[i], batch.pairs[i].second, scheme, dominant, &plan,
                                  cfg.pooling, sink);
        }
    }
    return result;
}

}  // namespace detail

/// Eq.-style per-layer MCL loss: forward both sides of each pair (shift
/// hooks on the non-dominant side), pool layer-t states, InfoNCE against the
/// batch's dominant embeddings.
inline double mcl_loss_layer(const ToyModelParams& params, const TranslationPairBatch& batch,
                             int layer, const MclConfig& cfg, const ShiftPlan& plan,
                             const TokenScheme& scheme, ToyModelParams* grads = nullptr) {
    bool listed = false;
    for (int t : cfg.layers) listed = listed || t == layer;
    if (!cfg.layers.empty() && !listed)
        throw InvalidInputError("mcl_loss_layer: layer " + std::to_string(layer) +
                                " is not in the configured layer set");
    return detail::mcl_loss_layers(params, batch, {layer}, cfg, plan, scheme, 1.0, grads).total;
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// L = L_MSFT + alpha * sum_t L_MCL^t over t in cfg.layers.
/// per_layer_mcl (optional) receives the unscaled per-layer MCL losses.
inline double combined_loss(const ToyModelParams& params, const MsftBatch& msft_batch,
                            const TranslationPairBatch& mcl_batch, double alpha,
                            const MclConfig& cfg, const ShiftPlan& plan, const TokenScheme& scheme,
                            ToyModelParams* grads = nullptr,
                            std::vector<double>* per_layer_mcl = nullptr,
                            const VectorUpdateSink& sink = {}) {
    if (alpha < 0.0) throw InvalidInputError("combined_loss: alpha must be non-negative");
    double loss = msft_loss(params, msft_batch, &plan, grads, &scheme, cfg.pooling, sink);
    if (per_layer_mcl != nullptr) per_layer_mcl->clear();
    if (alpha > 0.0 && !mcl_batch.pairs.empty() && !cfg.layers.empty()) {
        detail::MclResult mcl = detail::mcl_loss_layers(params, mcl_batch, cfg.layers, cfg, plan,
                                                        scheme, alpha, grads, sink);
        loss += alpha * mcl.total;
        if (per_layer_mcl != nullptr) *per_layer_mcl = mcl.per_layer;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    bool pass = false;
    std::string worst_tensor;
};

/// Central finite differences on a random subsample of coordinates.
/// Relative error uses max(|analytic|, |numeric|, 1e-3) as the denominator so
/// near-zero entries are judged on an absolute scale.
inline GradCheckReport check_gradient_flat(
    const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& x,
    const std::vector<double>& analytic, double tolerance, std::size_t num_coords = 200,
    std::uint64_t seed = 17, double step = 1e-6) {
    if (x.size() != analytic.size())
        throw InvalidInputError("check_gradient: gradient size mismatch");
    if (!std::isfinite(f(x))) throw NumericalError("check_gradient: non-finite loss at x");

    Rng rng(splitmix64(seed));
    GradCheckReport report;
    std::vector<double> work = x;
    const std::size_t n = x.size();
    const std::size_t checks = std::min(num_coords, n);
    for (std::size_t c = 0; c < checks; ++c) {
        const auto idx = n <= num_coords
                             ? c
                             : static_cast<std::size_t>(
                                   rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
        const double orig = work[idx];
        work[idx] = orig + step;
        const double fp = f(work);
        work[idx] = orig - step;
        const double fm = f(work);
        work[idx] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), 1e-3});
        const double rel = std::abs(numeric - analytic[idx]) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_tensor = "coordinate " + std::to_string(idx);
        }
        ++report.coords_checked;
    }
    report.pass = report.max_rel_error <= tolerance;
    return report;
}

/// Loss-function flavor over model parameters: loss_fn must return the loss
/// and, when the second argument is non-null, accumulate gradients into it.
using ModelLossFn = std::function<double(const ToyModelParams&, ToyModelParams*)>;

inline GradCheckReport check_gradient(const ModelLossFn& loss_fn, const ToyModelParams& at,
                                      double tolerance, std::size_t num_coords = 200,
                                      std::uint64_t seed = 17, double step = 1e-6) {
    ToyModelParams grads = toymodel::zeros_like(at);
    const double base = loss_fn(at, &grads);
    if (!std::isfinite(base)) throw NumericalError("check_gradient: non-finite loss");

    // flatten
    std::vector<double> x, g;
    std::vector<std::pair<std::string, std::size_t>> spans;  // tensor name, length
    for (const auto& [name, ptr] : grads.tensors()) {
        spans.push_back({name, ptr->size()});
        g.insert(g.end(), ptr->begin(), ptr->end());
    }
    for (const auto& [name, ptr] : at.tensors()) {
        (void)name;
        x.insert(x.end(), ptr->begin(), ptr->end());
    }

    ToyModelParams probe = at;
    auto scatter = [&probe](const std::vector<double>& flat) {
        std::size_t pos = 0;
        for (auto& [name, ptr] : probe.tensors()) {
            (void)name;
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                      flat.begin() + static_cast<std::ptrdiff_t>(pos + ptr->size()), ptr->begin());
            pos += ptr->size();
        }
    };
    auto f = [&](const std::vector<double>& flat) {
        scatter(flat);
        return loss_fn(probe, nullptr);
    };
    GradCheckReport report = check_gradient_flat(f, x, g, tolerance, num_coords, seed);

    // name the worst coordinate's tensor
    if (!report.worst_tensor.empty() && report.worst_tensor.rfind("coordinate ", 0) == 0) {
        std::size_t idx = std::stoull(report.worst_tensor.substr(11));
        for (const auto& [name, len] : spans) {
            if (idx < len) {
                report.worst_tensor = name + "[" + std::to_string(idx) + "]";
                break;
            }
            idx -= len;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Plain SGD with optional momentum; `velocity` must be zeros_like(params)
/// when momentum > 0 and is updated in place.
inline void sgd_step(ToyModelParams& params, const ToyModelParams& grads, double learning_rate,
                     double momentum = 0.0, ToyModelParams* velocity = nullptr) {
    if (momentum != 0.0 && velocity == nullptr)
        throw InvalidInputError("sgd_step: momentum needs a velocity buffer");
    auto p_tensors = params.tensors();
    auto g_tensors = const_cast<ToyModelParams&>(grads).tensors();
    if (momentum == 0.0) {
        for (std::size_t t = 0; t < p_tensors.size(); ++t) {
            auto& p = *p_tensors[t].second;
            const auto& g = *g_tensors[t].second;
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
        }
        return;
    }
    auto v_tensors = velocity->tensors();
    for (std::size_t t = 0; t < p_tensors.size(); ++t) {
        auto& p = *p_tensors[t].second;
        const auto& g = *g_tensors[t].second;
        auto& v = *v_tensors[t].second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            p[i] -= learning_rate * v[i];
        }
    }
}

}  // namespace shifcon::training
