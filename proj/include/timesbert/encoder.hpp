#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "timesbert/config.hpp"
#include "timesbert/embedding.hpp"
#include "timesbert/ops.hpp"
#include "timesbert/params.hpp"
#include "timesbert/rng.hpp"

namespace timesbert {

inline std::string layer_param(std::size_t layer, const std::string& leaf) {
    return "layers." + std::to_string(layer) + "." + leaf;
}

/// Closed-form parameter count of init_params(cfg):
///   layers  L * (4(D^2 + D) + 2 D F + F + D + 4D),  F = ffn_mult * D
///   embed   D P + context_len D + 3D
///   final LN 2D, heads D P + 2D + D M.
inline std::size_t expected_param_count(const EncoderConfig& cfg) {
    const std::size_t d = cfg.d_model, f = cfg.ffn_mult * cfg.d_model, p = cfg.patch_len;
    const std::size_t per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d;
    return cfg.n_layers * per_layer + d * p + cfg.context_len * d + 3 * d + 2 * d + d * p + 2 * d + d * cfg.n_domains;
}

/// BERT-style init: truncated normal (std 0.02) weights, zero biases and
/// LayerNorm beta, unit gamma.
inline ParamStore init_params(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    constexpr double std_init = 0.02;
    const std::size_t d = cfg.d_model, f = cfg.ffn_mult * cfg.d_model;
    auto normal = [&](Shape shape) {
        Tensor t(std::move(shape));
        for (double& v : t.values()) v = rng.truncated_normal(std_init);
        return t;
    };
    auto ones = [](std::size_t n) {
        Tensor t({n});
        for (double& v : t.values()) v = 1.0;
        return t;
    };
    ParamStore ps;
    ps.add(param_names::w_in, normal({d, cfg.patch_len}));
    ps.add(param_names::pos, normal({cfg.context_len, d}));
    ps.add(param_names::mask_token, normal({d}));
    ps.add(param_names::var_token, normal({d}));
    ps.add(param_names::dom_token, normal({d}));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        ps.add(layer_param(l, "ln1.gamma"), ones(d));
        ps.add(layer_param(l, "ln1.beta"), Tensor({d}));
        for (const char* w : {"q", "k", "v", "o"}) {
            ps.add(layer_param(l, std::string("attn.w") + w), normal({d, d}));
            ps.add(layer_param(l, std::string("attn.b") + w), Tensor({d}));
        }
        ps.add(layer_param(l, "ln2.gamma"), ones(d));
        ps.add(layer_param(l, "ln2.beta"), Tensor({d}));
        ps.add(layer_param(l, "ffn.w1"), normal({d, f}));
        ps.add(layer_param(l, "ffn.b1"), Tensor({f}));
        ps.add(layer_param(l, "ffn.w2"), normal({f, d}));
        ps.add(layer_param(l, "ffn.b2"), Tensor({d}));
    }
    ps.add("final_ln.gamma", ones(d));
    ps.add("final_ln.beta", Tensor({d}));
    ps.add(param_names::w_out, normal({d, cfg.patch_len}));
    ps.add(param_names::w_var, normal({d, 2}));
    ps.add(param_names::w_dom, normal({d, cfg.n_domains}));
    return ps;
}

struct ForwardMode {
    bool train = false;
    Rng* rng = nullptr;  // required when train && dropout > 0
};

inline Tensor linear(const Tensor& x, const ParamStore& ps, const std::string& w, const std::string& b) {
    return ops::add_bias(ops::matmul(x, ps.get(w)), ps.get(b));
}

/// Pre-LN block: Z + MHSA(LN(Z)), then + FFN(LN(.)) with GELU.
inline Tensor transformer_block(const Tensor& z, const AttentionMask& mask, const ParamStore& ps, std::size_t layer,
                                const EncoderConfig& cfg, const ForwardMode& mode = {}) {
    const double p_drop = mode.train ? cfg.dropout : 0.0;
    if (p_drop > 0.0 && mode.rng == nullptr) throw ConfigError("transformer_block: dropout needs a generator");
    auto P = [&](const char* leaf) { return layer_param(layer, leaf); };
    try {
        const Tensor h = ops::layer_norm(z, ps.get(P("ln1.gamma")), ps.get(P("ln1.beta")), cfg.ln_eps);
        const Tensor q = linear(h, ps, P("attn.wq"), P("attn.bq"));
        const Tensor k = linear(h, ps, P("attn.wk"), P("attn.bk"));
        const Tensor v = linear(h, ps, P("attn.wv"), P("attn.bv"));
        const Tensor a = ops::masked_attention(q, k, v, mask, cfg.n_heads);
        Tensor o = linear(a, ps, P("attn.wo"), P("attn.bo"));
        if (p_drop > 0.0) o = ops::dropout(o, p_drop, *mode.rng);
        const Tensor z1 = ops::add(z, o);
        const Tensor h2 = ops::layer_norm(z1, ps.get(P("ln2.gamma")), ps.get(P("ln2.beta")), cfg.ln_eps);
        Tensor f = linear(ops::gelu(linear(h2, ps, P("ffn.w1"), P("ffn.b1"))), ps, P("ffn.w2"), P("ffn.b2"));
        if (p_drop > 0.0) f = ops::dropout(f, p_drop, *mode.rng);
        return ops::add(z1, f);
    } catch (const NumericError& e) {
        throw NumericError("encoder layer " + std::to_string(layer) + ": " + e.what());
    }
}

/// L blocks followed by a final LayerNorm.
inline Tensor encoder_forward(const Tensor& z0, const AttentionMask& mask, const ParamStore& ps,
                              const EncoderConfig& cfg, const ForwardMode& mode = {}) {
    if (z0.rank() != 2 || z0.dim(1) != cfg.d_model) {
        throw DimensionError("encoder_forward: expected [L x " + std::to_string(cfg.d_model) + "], got " +
                             shape_str(z0.shape()));
    }
    Tensor z = z0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) z = transformer_block(z, mask, ps, l, cfg, mode);
    return ops::layer_norm(z, ps.get("final_ln.gamma"), ps.get("final_ln.beta"), cfg.ln_eps);
}

/// Embeds the grids (each with an optional mask plan), packs them into
/// context_len rows and runs the encoder; returns each grid's output rows.
inline std::vector<Tensor> encode_grids(const std::vector<TokenGrid>& grids, const std::vector<const MaskPlan*>& plans,
                                        const ParamStore& ps, const EncoderConfig& cfg, const ForwardMode& mode = {}) {
    if (!plans.empty() && plans.size() != grids.size()) throw DimensionError("encode_grids: one plan per grid");
    std::vector<Tensor> emb;
    emb.reserve(grids.size());
    for (std::size_t i = 0; i < grids.size(); ++i) emb.push_back(embed_grid(grids[i], ps, plans.empty() ? nullptr : plans[i]));
    std::vector<Tensor> out(grids.size());
    for (const auto& batch : pack(emb, {cfg.context_len, 0, true})) {
        std::vector<Tensor> rows;
        for (std::size_t r = 0; r < batch.batch_size(); ++r)
            rows.push_back(encoder_forward(batch.rows[r], batch.attention[r], ps, cfg, mode));
        for (std::size_t i = 0; i < batch.samples.size(); ++i) {
            const auto& pl = batch.placement[i];
            std::vector<std::size_t> idx(pl.length);
            std::iota(idx.begin(), idx.end(), pl.offset);
            out[batch.samples[i]] = ops::gather_rows(rows[pl.row], idx);
        }
    }
    return out;
}

}  // namespace timesbert
