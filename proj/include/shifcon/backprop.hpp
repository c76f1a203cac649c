#pragma once

#include <cmath>
#include <map>

#include "shifcon/matrix.hpp"
#include "shifcon/model.hpp"

namespace shifcon::training {

using numkit::Matrix;
using numkit::Vec;
using toymodel::ForwardTrace;
using toymodel::ToyModelParams;

namespace detail {

// dx for y = gamma * (x - mean) * rstd + beta, accumulating dgamma/dbeta.
inline Matrix layernorm_backward(const Matrix& dy, const Matrix& x, const Vec& means,
                                 const Vec& rstds, const Vec& gamma, Vec& dgamma, Vec& dbeta) {
    const std::size_t t = x.rows, d = x.cols;
    Matrix dx(t, d);
    for (std::size_t i = 0; i < t; ++i) {
        const double r = rstds[i];
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x(i, j) - means[i]) * r;
            const double g = dy(i, j) * gamma[j];
            dgamma[j] += dy(i, j) * xhat;
            dbeta[j] += dy(i, j);
            m1 += g;
            m2 += g * xhat;
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x(i, j) - means[i]) * r;
            const double g = dy(i, j) * gamma[j];
            dx(i, j) = r * (g - m1 - xhat * m2);
        }
    }
    return dx;
}

// grads for y = x * w + b given dy; returns dx.
inline Matrix affine_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix& dw,
                              Vec& db) {
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t a = 0; a < x.cols; ++a) {
            const double xi = x(i, a);
            if (xi == 0.0) continue;
            for (std::size_t j = 0; j < dy.cols; ++j) dw(a, j) += xi * dy(i, j);
        }
    for (std::size_t i = 0; i < dy.rows; ++i)
        for (std::size_t j = 0; j < dy.cols; ++j) db[j] += dy(i, j);
    return numkit::matmul(dy, numkit::transpose(w));
}

}  // namespace detail

/// Exact reverse-mode pass through one cached forward. Gradients enter as
/// dlogits (may be null) plus optional injected per-layer gradients keyed by
/// 1-based layer index, taken with respect to the post-hook hidden states.
/// Hooks are constant shifts during training, so their Jacobian is the
/// identity and they do not appear here.
inline void backward_into(const ToyModelParams& params, const ForwardTrace& trace,
                          const Matrix* dlogits, const std::map<int, Matrix>* layer_grads,
                          ToyModelParams& grads) {
    const auto& cfg = params.config;
    const std::size_t t = trace.tokens.size();
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto heads = static_cast<std::size_t>(cfg.num_heads);
    const std::size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dx(t, d);
    if (dlogits != nullptr) {
        if (dlogits->rows != t || dlogits->cols != static_cast<std::size_t>(cfg.vocab_size))
            throw InvalidInputError("backward: dlogits shape mismatch");
        Matrix d_fn_out =
            detail::affine_backward(*dlogits, trace.fn_out, params.w_head, grads.w_head, grads.b_head);
        dx = detail::layernorm_backward(d_fn_out, trace.layers.back(), trace.fn_mean, trace.fn_rstd,
                                        params.final_norm.gamma, grads.final_norm.gamma,
                                        grads.final_norm.beta);
    }

    for (int layer = cfg.num_layers; layer >= 1; --layer) {
        if (layer_grads != nullptr) {
            auto it = layer_grads->find(layer);
            if (it != layer_grads->end()) {
                if (it->second.rows != t || it->second.cols != d)
                    throw InvalidInputError("backward: injected gradient shape mismatch at layer " +
                                            std::to_string(layer));
                for (std::size_t i = 0; i < t * d; ++i) dx.data[i] += it->second.data[i];
            }
        }

        const auto& blk = params.blocks[static_cast<std::size_t>(layer) - 1];
        auto& gblk = grads.blocks[static_cast<std::size_t>(layer) - 1];
        const auto& cache = trace.block_cache[static_cast<std::size_t>(layer) - 1];

        // x_out = resid_mid + mlp(ln2(resid_mid))
        Matrix d_mlp_act =
            detail::affine_backward(dx, cache.mlp_act, blk.w_down, gblk.w_down, gblk.b_down);
        Matrix d_mlp_pre = d_mlp_act;
        for (std::size_t i = 0; i < d_mlp_pre.data.size(); ++i)
            d_mlp_pre.data[i] *= toymodel::detail::gelu_grad(cache.mlp_pre.data[i]);
        Matrix d_ln2_out =
            detail::affine_backward(d_mlp_pre, cache.ln2_out, blk.w_up, gblk.w_up, gblk.b_up);
        Matrix d_resid_mid =
            detail::layernorm_backward(d_ln2_out, cache.resid_mid, cache.ln2_mean, cache.ln2_rstd,
                                       blk.ln2.gamma, gblk.ln2.gamma, gblk.ln2.beta);
        for (std::size_t i = 0; i < t * d; ++i) d_resid_mid.data[i] += dx.data[i];

        // resid_mid = ln1_in + wo(attention(ln1(ln1_in)))
        Matrix d_ctx =
            detail::affine_backward(d_resid_mid, cache.attn_ctx, blk.wo, gblk.wo, gblk.bo);

        Matrix dq(t, d), dk(t, d), dv(t, d);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            const Matrix& probs = cache.attn_probs[h];
            for (std::size_t i = 0; i < t; ++i) {
                // d_probs over the causal row, then softmax backward
                Vec dprobs(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                    double acc = 0.0;
                    for (std::size_t a = 0; a < dh; ++a)
                        acc += d_ctx(i, off + a) * cache.v(j, off + a);
                    dprobs[j] = acc;
                    for (std::size_t a = 0; a < dh; ++a)
                        dv(j, off + a) += probs(i, j) * d_ctx(i, off + a);
                }
                double dot_p = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot_p += probs(i, j) * dprobs[j];
                for (std::size_t j = 0; j <= i; ++j) {
                    const double dscore = probs(i, j) * (dprobs[j] - dot_p) * inv_sqrt_dh;
                    for (std::size_t a = 0; a < dh; ++a) {
                        dq(i, off + a) += dscore * cache.k(j, off + a);
                        dk(j, off + a) += dscore * cache.q(i, off + a);
                    }
                }
            }
        }

        Matrix d_ln1_out = detail::affine_backward(dq, cache.ln1_out, blk.wq, gblk.wq, gblk.bq);
        {
            Matrix dk_in = detail::affine_backward(dk, cache.ln1_out, blk.wk, gblk.wk, gblk.bk);
            Matrix dv_in = detail::affine_backward(dv, cache.ln1_out, blk.wv, gblk.wv, gblk.bv);
            for (std::size_t i = 0; i < t * d; ++i)
                d_ln1_out.data[i] += dk_in.data[i] + dv_in.data[i];
        }
        Matrix d_ln1_in =
            detail::layernorm_backward(d_ln1_out, cache.ln1_in, cache.ln1_mean, cache.ln1_rstd,
                                       blk.ln1.gamma, gblk.ln1.gamma, gblk.ln1.beta);
        for (std::size_t i = 0; i < t * d; ++i) dx.data[i] = d_resid_mid.data[i] + d_ln1_in.data[i];
    }

    for (std::size_t i = 0; i < t; ++i) {
        const auto tok = static_cast<std::size_t>(trace.tokens[i]);
        for (std::size_t j = 0; j < d; ++j) {
            grads.tok_embed(tok, j) += dx(i, j);
            grads.pos_embed(i, j) += dx(i, j);
        }
    }
}

}  // namespace shifcon::training
