#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/tensor.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace ttadapt {

struct ModelConfig {
    std::size_t num_layers = 3;
    std::size_t hidden_dim = 32;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 128;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 16;
    std::size_t num_outputs = 4;
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

inline void validate_config(const ModelConfig& c) {
    if (!c.num_layers || !c.hidden_dim || !c.num_heads || !c.ffn_dim || !c.vocab_size || !c.max_seq_len ||
        !c.num_outputs) {
        throw ConfigError("model: all dimensions must be positive");
    }
    if (c.hidden_dim % c.num_heads != 0) {
        throw ConfigError("model: num_heads " + std::to_string(c.num_heads) + " does not divide hidden_dim " +
                          std::to_string(c.hidden_dim));
    }
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerWeights {
    // Indexed by ProjModule: Q, K, V, O. Each D × D.
    std::array<DenseTensor, 4> proj;
    std::array<DenseTensor, 4> proj_t;
    DenseTensor w_up, w_up_t;     // D × F
    DenseTensor w_down, w_down_t; // F × D
    std::vector<double> ln1_scale, ln1_offset, ln2_scale, ln2_offset;
};

/// Pre-norm encoder; nothing in here is ever trained.
struct FrozenTransformer {
    ModelConfig config;
    DenseTensor token_embedding;    // V × D
    DenseTensor position_embedding; // S_max × D
    std::vector<LayerWeights> layers;
    std::vector<double> final_scale, final_offset;
    DenseTensor head; // D × outputs

    [[nodiscard]] const DenseTensor& weight(std::size_t layer, ProjModule m) const {
        return layers.at(layer).proj[static_cast<std::size_t>(m)];
    }

    /// FNV-1a over every weight byte; used to audit immutability.
    [[nodiscard]] std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](std::span<const double> v) {
            for (double x : v) {
                unsigned char b[sizeof(double)];
                std::memcpy(b, &x, sizeof(double));
                for (unsigned char c : b) {
                    h ^= c;
                    h *= 1099511628211ULL;
                }
            }
        };
        mix(token_embedding.values());
        mix(position_embedding.values());
        for (const auto& L : layers) {
            for (const auto& w : L.proj) mix(w.values());
            mix(L.w_up.values());
            mix(L.w_down.values());
            mix(L.ln1_scale);
            mix(L.ln1_offset);
            mix(L.ln2_scale);
            mix(L.ln2_offset);
        }
        mix(final_scale);
        mix(final_offset);
        mix(head.values());
        return h;
    }
};

/// Weights ~ normal(0, 1/√D); layer norms start at scale 1, offset 0.
inline FrozenTransformer build_frozen_model(const ModelConfig& cfg) {
    validate_config(cfg);
    FrozenTransformer m;
    m.config = cfg;
    Rng rng(cfg.seed);
    const std::size_t D = cfg.hidden_dim, F = cfg.ffn_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    m.token_embedding = random_normal({cfg.vocab_size, D}, rng, 0.0, sd);
    m.position_embedding = random_normal({cfg.max_seq_len, D}, rng, 0.0, sd);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        LayerWeights L;
        for (std::size_t p = 0; p < 4; ++p) {
            L.proj[p] = random_normal({D, D}, rng, 0.0, sd);
            L.proj_t[p] = transpose(L.proj[p]);
        }
        L.w_up = random_normal({D, F}, rng, 0.0, sd);
        L.w_up_t = transpose(L.w_up);
        L.w_down = random_normal({F, D}, rng, 0.0, sd);
        L.w_down_t = transpose(L.w_down);
        L.ln1_scale.assign(D, 1.0);
        L.ln1_offset.assign(D, 0.0);
        L.ln2_scale.assign(D, 1.0);
        L.ln2_offset.assign(D, 0.0);
        m.layers.push_back(std::move(L));
    }
    m.final_scale.assign(D, 1.0);
    m.final_offset.assign(D, 0.0);
    m.head = random_normal({D, cfg.num_outputs}, rng, 0.0, sd);
    return m;
}

/// Equal-length token sequences, row-major (batch_size × seq_len).
struct TokenBatch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::uint32_t> tokens;

    [[nodiscard]] std::size_t rows() const noexcept { return batch_size * seq_len; }
};

namespace detail {

struct LayerNormCache {
    DenseTensor normalized; // x̂
    std::vector<double> inv_std;
};

inline DenseTensor layer_norm(const DenseTensor& x, const std::vector<double>& scale, const std::vector<double>& offset,
                              LayerNormCache* cache) {
    const std::size_t n = x.extent(0), d = x.extent(1);
    DenseTensor y = DenseTensor::matrix(n, d);
    if (cache) {
        cache->normalized = DenseTensor::matrix(n, d);
        cache->inv_std.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            y(i, j) = scale[j] * xh + offset[j];
            if (cache) cache->normalized(i, j) = xh;
        }
        if (cache) cache->inv_std[i] = inv;
    }
    return y;
}

inline DenseTensor layer_norm_backward(const LayerNormCache& c, const std::vector<double>& scale, const DenseTensor& dy) {
    const std::size_t n = dy.extent(0), d = dy.extent(1);
    DenseTensor dx = DenseTensor::matrix(n, d);
    std::vector<double> dxh(d);
    for (std::size_t i = 0; i < n; ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dxh[j] = dy(i, j) * scale[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * c.normalized(i, j);
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
            dx(i, j) = c.inv_std[i] * (dxh[j] - mean_dxh - c.normalized(i, j) * mean_dxh_xh);
    }
    return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

} // namespace detail

/// Reverse-mode record of one forward pass. Single use: backward consumes it.
struct ForwardTape {
    struct Layer {
        detail::LayerNormCache ln1, ln2;
        DenseTensor q, k, v;
        std::vector<DenseTensor> probs; // per (sequence, head): S × S
        DenseTensor mlp_pre;            // pre-GELU
        std::array<std::optional<SiteTape>, 4> sites;
    };
    std::size_t batch_size = 0, seq_len = 0, task = 0;
    const MetaTTAdapter* adapter = nullptr;
    std::vector<Layer> layers;
    std::vector<DenseTensor> layer_outputs; // residual stream after each layer
    detail::LayerNormCache final_ln;
    bool consumed = false;
};

/// Model plus an adapter routed into its projection maps.
class AdaptedModel {
public:
    AdaptedModel(const FrozenTransformer& model, const MetaTTAdapter* adapter) : model_(&model), adapter_(adapter) {
        slot_.fill(-1);
        if (!adapter_) return;
        const AdapterSpec& s = adapter_->spec();
        const std::size_t D = model.config.hidden_dim;
        if (s.d_in != D || s.d_out != D) {
            throw ShapeError("inject_adapter: adapter dims " + std::to_string(s.d_in) + "x" + std::to_string(s.d_out) +
                             " do not match hidden dim " + std::to_string(D));
        }
        if (s.num_layers != model.config.num_layers) {
            throw ShapeError("inject_adapter: adapter has " + std::to_string(s.num_layers) + " layers, model has " +
                             std::to_string(model.config.num_layers));
        }
        for (std::size_t i = 0; i < s.target_modules.size(); ++i)
            slot_[static_cast<std::size_t>(s.target_modules[i])] = static_cast<int>(i);
    }

    [[nodiscard]] const FrozenTransformer& model() const noexcept { return *model_; }
    [[nodiscard]] const MetaTTAdapter* adapter() const noexcept { return adapter_; }
    [[nodiscard]] bool is_adapted(ProjModule m) const noexcept { return slot_[static_cast<std::size_t>(m)] >= 0; }

    /// Outputs are batch_size × num_outputs. Pass a tape to enable backward().
    DenseTensor forward(const TokenBatch& batch, std::size_t task = 0, ForwardTape* tape = nullptr) const;

    /// ∂loss/∂(adapter parameters) given ∂loss/∂outputs. Frozen weights get nothing.
    AdapterGrads backward(ForwardTape& tape, const DenseTensor& d_outputs) const;

private:
    DenseTensor project(const DenseTensor& x, std::size_t layer, ProjModule m, std::size_t task,
                        ForwardTape::Layer* tl) const {
        const int slot = slot_[static_cast<std::size_t>(m)];
        const DenseTensor& w = model_->weight(layer, m);
        if (slot < 0) return matmul(x, w);
        const SiteKey key{layer, static_cast<std::size_t>(slot), task};
        SiteTape* st = nullptr;
        if (tl) st = &tl->sites[static_cast<std::size_t>(m)].emplace();
        return adapted_forward(*adapter_, x, w, key, st);
    }

    DenseTensor project_backward(const DenseTensor& dy, std::size_t layer, ProjModule m, ForwardTape::Layer& tl,
                                 AdapterGrads& grads) const {
        DenseTensor dx = matmul(dy, model_->layers[layer].proj_t[static_cast<std::size_t>(m)]);
        if (const auto& st = tl.sites[static_cast<std::size_t>(m)]; st) add_in_place(dx, adapter_backward(*adapter_, *st, dy, grads));
        return dx;
    }

    const FrozenTransformer* model_;
    const MetaTTAdapter* adapter_;
    std::array<int, 4> slot_{};
};

/// Routes every targeted projection through the adapter; `target_modules`
/// must match the adapter's own ordering.
inline AdaptedModel inject_adapter(const FrozenTransformer& model, const MetaTTAdapter& adapter,
                                   const std::vector<ProjModule>& target_modules) {
    if (target_modules != adapter.spec().target_modules) {
        throw ConfigError("inject_adapter: target modules '" + format_module_list(target_modules) +
                          "' differ from adapter ordering '" + format_module_list(adapter.spec().target_modules) + "'");
    }
    return AdaptedModel(model, &adapter);
}

inline DenseTensor AdaptedModel::forward(const TokenBatch& batch, std::size_t task, ForwardTape* tape) const {
    const ModelConfig& cfg = model_->config;
    const std::size_t D = cfg.hidden_dim, H = cfg.num_heads, dh = D / H;
    const std::size_t B = batch.batch_size, S = batch.seq_len, N = batch.rows();
    if (B == 0 || S == 0 || batch.tokens.size() != N) throw ShapeError("model_forward: malformed token batch");
    if (S > cfg.max_seq_len) {
        throw ShapeError("model_forward: sequence length " + std::to_string(S) + " exceeds max " +
                         std::to_string(cfg.max_seq_len));
    }
    if (adapter_) {
        const std::size_t tasks = adapter_->variant() == Variant::TT4plus1D ? adapter_->spec().num_tasks : 1;
        if (task >= tasks) throw ShapeError("model_forward: task id " + std::to_string(task) + " out of range");
    }
    if (tape) {
        *tape = ForwardTape{};
        tape->batch_size = B;
        tape->seq_len = S;
        tape->task = task;
        tape->adapter = adapter_;
        tape->layers.resize(cfg.num_layers);
    }

    DenseTensor x = DenseTensor::matrix(N, D);
    for (std::size_t i = 0; i < N; ++i) {
        const std::uint32_t tok = batch.tokens[i];
        if (tok >= cfg.vocab_size) {
            throw ShapeError("model_forward: token id " + std::to_string(tok) + " >= vocab size " +
                             std::to_string(cfg.vocab_size));
        }
        const std::size_t pos = i % S;
        for (std::size_t j = 0; j < D; ++j) x(i, j) = model_->token_embedding(tok, j) + model_->position_embedding(pos, j);
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& W = model_->layers[l];
        ForwardTape::Layer* tl = tape ? &tape->layers[l] : nullptr;

        const DenseTensor h1 = detail::layer_norm(x, W.ln1_scale, W.ln1_offset, tl ? &tl->ln1 : nullptr);
        DenseTensor q = project(h1, l, ProjModule::Q, task, tl);
        DenseTensor k = project(h1, l, ProjModule::K, task, tl);
        DenseTensor v = project(h1, l, ProjModule::V, task, tl);

        DenseTensor ctx = DenseTensor::matrix(N, D);
        std::vector<double> scores(S * S);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < S; ++i) {
                    const double* qi = q.data() + (b * S + i) * D + c0;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < S; ++j) {
                        const double* kj = k.data() + (b * S + j) * D + c0;
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
                        s *= inv_sqrt_dh;
                        scores[i * S + j] = s;
                        mx = std::max(mx, s);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < S; ++j) {
                        scores[i * S + j] = std::exp(scores[i * S + j] - mx);
                        z += scores[i * S + j];
                    }
                    for (std::size_t j = 0; j < S; ++j) scores[i * S + j] /= z;
                    double* ci = ctx.data() + (b * S + i) * D + c0;
                    for (std::size_t j = 0; j < S; ++j) {
                        const double p = scores[i * S + j];
                        const double* vj = v.data() + (b * S + j) * D + c0;
                        for (std::size_t e = 0; e < dh; ++e) ci[e] += p * vj[e];
                    }
                }
                if (tl) tl->probs.push_back(DenseTensor({S, S}, scores));
            }
        }
        const DenseTensor o = project(ctx, l, ProjModule::O, task, tl);
        add_in_place(x, o);

        const DenseTensor h2 = detail::layer_norm(x, W.ln2_scale, W.ln2_offset, tl ? &tl->ln2 : nullptr);
        DenseTensor u = matmul(h2, W.w_up);
        DenseTensor g = u;
        for (double& e : g.values()) e = detail::gelu(e);
        add_in_place(x, matmul(g, W.w_down));

        if (tl) {
            tl->q = std::move(q);
            tl->k = std::move(k);
            tl->v = std::move(v);
            tl->mlp_pre = std::move(u);
            tape->layer_outputs.push_back(x);
        }
    }

    const DenseTensor hf =
        detail::layer_norm(x, model_->final_scale, model_->final_offset, tape ? &tape->final_ln : nullptr);
    DenseTensor pooled = DenseTensor::matrix(B, D);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t j = 0; j < D; ++j) pooled(b, j) += hf(b * S + s, j);
    scale_in_place(pooled, 1.0 / static_cast<double>(S));
    return matmul(pooled, model_->head);
}

inline AdapterGrads AdaptedModel::backward(ForwardTape& tape, const DenseTensor& d_outputs) const {
    if (tape.consumed) throw ShapeError("backward: tape already consumed");
    if (tape.layers.empty()) throw ShapeError("backward: tape was not recorded");
    if (tape.adapter != adapter_) throw ShapeError("backward: tape belongs to a different adapter binding");
    tape.consumed = true;
    if (!adapter_) return {};

    const ModelConfig& cfg = model_->config;
    const std::size_t D = cfg.hidden_dim, H = cfg.num_heads, dh = D / H;
    const std::size_t B = tape.batch_size, S = tape.seq_len, N = B * S;
    if (d_outputs.rank() != 2 || d_outputs.extent(0) != B || d_outputs.extent(1) != cfg.num_outputs) {
        throw ShapeError("backward: output gradient shape " + shape_to_string(d_outputs.shape()) + " mismatch");
    }
    AdapterGrads grads = zero_grads(*adapter_);

    const DenseTensor d_pooled = matmul_nt(d_outputs, model_->head);
    DenseTensor d_hf = DenseTensor::matrix(N, D);
    const double inv_s = 1.0 / static_cast<double>(S);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t j = 0; j < D; ++j) d_hf(b * S + s, j) = d_pooled(b, j) * inv_s;
    DenseTensor dx = detail::layer_norm_backward(tape.final_ln, model_->final_scale, d_hf);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = cfg.num_layers; l-- > 0;) {
        const LayerWeights& W = model_->layers[l];
        ForwardTape::Layer& tl = tape.layers[l];

        DenseTensor d_g = matmul(dx, W.w_down_t);
        for (std::size_t i = 0; i < d_g.size(); ++i) d_g[i] *= detail::gelu_grad(tl.mlp_pre[i]);
        add_in_place(dx, detail::layer_norm_backward(tl.ln2, W.ln2_scale, matmul(d_g, W.w_up_t)));

        const DenseTensor d_ctx = project_backward(dx, l, ProjModule::O, tl, grads);
        DenseTensor dq = DenseTensor::matrix(N, D), dk = DenseTensor::matrix(N, D), dv = DenseTensor::matrix(N, D);
        std::vector<double> dp(S * S);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const DenseTensor& P = tl.probs[b * H + h];
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < S; ++i) {
                    const double* dci = d_ctx.data() + (b * S + i) * D + c0;
                    double row_dot = 0.0;
                    for (std::size_t j = 0; j < S; ++j) {
                        const double* vj = tl.v.data() + (b * S + j) * D + c0;
                        double* dvj = dv.data() + (b * S + j) * D + c0;
                        const double p = P(i, j);
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            s += dci[e] * vj[e];
                            dvj[e] += p * dci[e];
                        }
                        dp[i * S + j] = s;
                        row_dot += s * p;
                    }
                    const double* qi = tl.q.data() + (b * S + i) * D + c0;
                    double* dqi = dq.data() + (b * S + i) * D + c0;
                    for (std::size_t j = 0; j < S; ++j) {
                        const double ds = P(i, j) * (dp[i * S + j] - row_dot) * inv_sqrt_dh;
                        const double* kj = tl.k.data() + (b * S + j) * D + c0;
                        double* dkj = dk.data() + (b * S + j) * D + c0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dqi[e] += ds * kj[e];
                            dkj[e] += ds * qi[e];
                        }
                    }
                }
            }
        }
        DenseTensor d_h1 = project_backward(dq, l, ProjModule::Q, tl, grads);
        add_in_place(d_h1, project_backward(dk, l, ProjModule::K, tl, grads));
        add_in_place(d_h1, project_backward(dv, l, ProjModule::V, tl, grads));
        // Embeddings are frozen: layer 0 stops at its attention inputs.
        if (l > 0) add_in_place(dx, detail::layer_norm_backward(tl.ln1, W.ln1_scale, d_h1));
    }
    return grads;
}

/// Convenience overload: forward with an optional adapter.
inline DenseTensor model_forward(const FrozenTransformer& model, const MetaTTAdapter* adapter, const TokenBatch& batch,
                                 std::size_t task = 0, ForwardTape* tape = nullptr) {
    return AdaptedModel(model, adapter).forward(batch, task, tape);
}

} // namespace ttadapt
