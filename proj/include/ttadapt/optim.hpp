#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace ttadapt {

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    /// Linear warmup over this fraction of total steps, then constant.
    double warmup_ratio = 0.06;
    std::optional<double> clip_max_norm;

    bool operator==(const OptimizerConfig&) const = default;
};

inline void validate_config(const OptimizerConfig& c) {
    if (!(c.learning_rate > 0.0)) throw ConfigError("optimizer: learning_rate must be > 0");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
        throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
    if (!(c.epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be > 0");
    if (!(c.weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (!(c.warmup_ratio >= 0.0 && c.warmup_ratio < 1.0)) throw ConfigError("optimizer: warmup_ratio must be in [0, 1)");
    if (c.clip_max_norm && !(*c.clip_max_norm > 0.0)) throw ConfigError("optimizer: clip_max_norm must be > 0");
}

/// AdamW moments per trainable tensor plus the bias-correction step counter.
struct OptimizerState {
    std::vector<DenseTensor> first;
    std::vector<DenseTensor> second;
    std::size_t step = 0;

    /// Zero moments at the given shapes and restart bias correction.
    void reset(const std::vector<const DenseTensor*>& params) {
        first.clear();
        second.clear();
        for (const DenseTensor* p : params) {
            first.emplace_back(p->shape());
            second.emplace_back(p->shape());
        }
        step = 0;
    }
    void reset(const std::vector<DenseTensor*>& params) {
        reset(std::vector<const DenseTensor*>(params.begin(), params.end()));
    }
};

/// lr multiplier for 1-based `step` of `total_steps`.
inline double warmup_scale(std::size_t step, std::size_t total_steps, double warmup_ratio) {
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (warm == 0 || step >= warm) return 1.0;
    return static_cast<double>(step) / static_cast<double>(warm);
}

/// Bias-corrected AdamW with decoupled decay p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε).
inline void adamw_step(OptimizerState& state, const std::vector<DenseTensor*>& params, const AdapterGrads& grads,
                       const OptimizerConfig& cfg, double lr_scale = 1.0) {
    if (params.size() != grads.size() || params.size() != state.first.size()) {
        throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                         " grads, " + std::to_string(state.first.size()) + " moment slots");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.first[i].shape()) {
            throw ShapeError("adamw_step: tensor " + std::to_string(i) + " shape " +
                             shape_to_string(params[i]->shape()) + " vs grad " + shape_to_string(grads[i].shape()) +
                             " vs moment " + shape_to_string(state.first[i].shape()) +
                             " (moments not re-initialized after truncation?)");
        }
    }
    ++state.step;
    const double lr = cfg.learning_rate * lr_scale;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i]->data();
        const double* g = grads[i].data();
        double* m = state.first[i].data();
        double* v = state.second[i].data();
        for (std::size_t j = 0; j < params[i]->size(); ++j) {
            p[j] *= 1.0 - lr * cfg.weight_decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

inline double global_norm(const AdapterGrads& grads) {
    double s = 0.0;
    for (const auto& g : grads)
        for (double v : g.values()) s += v * v;
    return std::sqrt(s);
}

/// Global-norm clipping; returns the pre-clip norm.
inline double clip_gradients(AdapterGrads& grads, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip_gradients: max_norm must be > 0");
    const double total = global_norm(grads);
    if (total > max_norm) {
        const double s = max_norm / total;
        for (auto& g : grads) scale_in_place(g, s);
    }
    return total;
}

struct CoreGradNorm {
    std::string name;
    double value = 0.0;

    bool operator==(const CoreGradNorm&) const = default;
};

namespace detail {
// ‖∇‖_F / √(non-zero count of the parameter); 0 when the parameter is all zero.
inline double normalized_grad(std::span<const double> grad, std::span<const double> param) {
    double g2 = 0.0;
    std::size_t nnz = 0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        g2 += grad[i] * grad[i];
        if (param[i] != 0.0) ++nnz;
    }
    return nnz ? std::sqrt(g2) / std::sqrt(static_cast<double>(nnz)) : 0.0;
}

inline std::vector<double> slice_values(const DenseTensor& core, std::size_t idx) {
    const std::size_t rl = core.extent(0), n = core.extent(1), rr = core.extent(2);
    std::vector<double> out;
    out.reserve(rl * rr);
    for (std::size_t a = 0; a < rl; ++a)
        for (std::size_t b = 0; b < rr; ++b) out.push_back(core.data()[(a * n + idx) * rr + b]);
    return out;
}
} // namespace detail

/// Per-core normalized gradient diagnostic ‖∇𝒢‖_F / √|𝒢|, |𝒢| = non-zero count.
/// Boundary cores report the whole core; layer, module and head cores report
/// the mean over their slices; the task core reports one value per task slice.
/// The LoRA baseline reports the mean over all A and all B matrices.
inline std::vector<CoreGradNorm> core_gradient_norms(const MetaTTAdapter& ad, const AdapterGrads& grads) {
    const auto params = ad.parameters();
    if (params.size() != grads.size()) throw ShapeError("core_gradient_norms: grads do not match adapter");
    std::vector<CoreGradNorm> out;
    if (!ad.is_tt()) {
        double a = 0.0, b = 0.0;
        const std::size_t sites = params.size() / 2;
        for (std::size_t i = 0; i < sites; ++i) {
            a += detail::normalized_grad(grads[2 * i].values(), params[2 * i]->values());
            b += detail::normalized_grad(grads[2 * i + 1].values(), params[2 * i + 1]->values());
        }
        out.push_back({"A", a / static_cast<double>(sites)});
        out.push_back({"B", b / static_cast<double>(sites)});
        return out;
    }
    const auto roles = ad.roles();
    for (std::size_t k = 0; k < roles.size(); ++k) {
        const std::string name = "G" + std::to_string(k + 1);
        const DenseTensor& g = grads[k];
        const DenseTensor& p = *params[k];
        if (roles[k] == ModeRole::Input || roles[k] == ModeRole::Output) {
            out.push_back({name, detail::normalized_grad(g.values(), p.values())});
            continue;
        }
        const std::size_t n = p.extent(1);
        std::vector<double> per_slice(n);
        for (std::size_t s = 0; s < n; ++s)
            per_slice[s] = detail::normalized_grad(detail::slice_values(g, s), detail::slice_values(p, s));
        if (roles[k] == ModeRole::Task) {
            for (std::size_t s = 0; s < n; ++s) out.push_back({name + "[" + std::to_string(s) + "]", per_slice[s]});
        } else {
            double mean = 0.0;
            for (double v : per_slice) mean += v;
            out.push_back({name, mean / static_cast<double>(n)});
        }
    }
    return out;
}

} // namespace ttadapt
