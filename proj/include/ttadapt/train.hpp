#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/dmrg.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/model.hpp"
#include "ttadapt/optim.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/task.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace ttadapt {

struct LossResult {
    double value = 0.0;
    DenseTensor grad; // ∂loss/∂outputs
};

/// Mean squared error over every output entry.
inline LossResult mse_loss(const DenseTensor& outputs, const DenseTensor& targets) {
    if (outputs.shape() != targets.shape()) {
        throw ShapeError("mse_loss: outputs " + shape_to_string(outputs.shape()) + " vs targets " +
                         shape_to_string(targets.shape()));
    }
    LossResult r{0.0, DenseTensor(outputs.shape())};
    const double inv = 1.0 / static_cast<double>(outputs.size());
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const double e = outputs[i] - targets[i];
        r.value += e * e;
        r.grad[i] = 2.0 * e * inv;
    }
    r.value *= inv;
    return r;
}

/// Mean softmax cross-entropy over rows.
inline LossResult cross_entropy_loss(const DenseTensor& logits, std::span<const std::size_t> labels) {
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    if (labels.size() != n) throw ShapeError("cross_entropy_loss: label count mismatch");
    LossResult r{0.0, DenseTensor(logits.shape())};
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) throw ShapeError("cross_entropy_loss: label out of range");
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits(i, j) - mx);
        r.value += std::log(z) + mx - logits(i, labels[i]);
        for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(logits(i, j) - mx) / z;
            r.grad(i, j) = (p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
        }
    }
    r.value /= static_cast<double>(n);
    return r;
}

inline LossResult task_loss(TaskKind kind, const Dataset& ds, std::span<const std::size_t> rows,
                            const DenseTensor& outputs) {
    if (kind == TaskKind::TeacherRegression) {
        DenseTensor t = DenseTensor::matrix(rows.size(), ds.targets.extent(1));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < t.extent(1); ++j) t(i, j) = ds.targets(rows[i], j);
        return mse_loss(outputs, t);
    }
    std::vector<std::size_t> labels;
    for (std::size_t r : rows) labels.push_back(ds.labels[r]);
    return cross_entropy_loss(outputs, labels);
}

struct EvalResult {
    double loss = 0.0;
    /// R² for regression, accuracy for classification.
    double metric = 0.0;
};

inline EvalResult evaluate(const AdaptedModel& view, TaskKind kind, const Dataset& ds, std::size_t task = 0) {
    const std::size_t n = ds.size();
    if (n == 0) return {};
    constexpr std::size_t chunk = 64;
    double loss_sum = 0.0, sse = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> rows(std::min(n, start + chunk) - start);
        std::iota(rows.begin(), rows.end(), start);
        const DenseTensor out = view.forward(ds.batch(rows), task);
        const LossResult l = task_loss(kind, ds, rows, out);
        loss_sum += l.value * static_cast<double>(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (kind == TaskKind::TeacherRegression) {
                for (std::size_t j = 0; j < out.extent(1); ++j) {
                    const double e = out(i, j) - ds.targets(rows[i], j);
                    sse += e * e;
                }
            } else {
                std::size_t best = 0;
                for (std::size_t j = 1; j < out.extent(1); ++j)
                    if (out(i, j) > out(i, best)) best = j;
                if (best == ds.labels[rows[i]]) ++correct;
            }
        }
    }
    EvalResult r;
    r.loss = loss_sum / static_cast<double>(n);
    if (kind == TaskKind::TeacherRegression) {
        double sst = 0.0;
        for (std::size_t j = 0; j < ds.targets.extent(1); ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += ds.targets(i, j);
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) sst += (ds.targets(i, j) - mean) * (ds.targets(i, j) - mean);
        }
        r.metric = sst > 0.0 ? 1.0 - sse / sst : 0.0;
    } else {
        r.metric = static_cast<double>(correct) / static_cast<double>(n);
    }
    return r;
}

struct TrainOptions {
    std::size_t batch_size = 16;
    /// Stop once eval loss ≤ ratio × the pre-training eval loss (single-task runs).
    std::optional<double> early_stop_ratio;

    bool operator==(const TrainOptions&) const = default;
};

struct EpochRow {
    std::size_t epoch = 0;
    std::size_t step = 0; // optimizer steps taken so far
    std::size_t task_id = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
    double eval_metric = 0.0;
    std::vector<std::size_t> ranks; // interior bond ranks
    std::size_t param_count = 0;
    std::vector<CoreGradNorm> grad_norms; // epoch means
    double wallclock_s = 0.0;
    bool swept = false;

    /// Field-wise equality ignoring wall-clock time.
    [[nodiscard]] bool same_values(const EpochRow& o) const {
        return epoch == o.epoch && step == o.step && task_id == o.task_id && train_loss == o.train_loss &&
               eval_loss == o.eval_loss && eval_metric == o.eval_metric && ranks == o.ranks &&
               param_count == o.param_count && grad_norms == o.grad_norms && swept == o.swept;
    }
};

struct TrainReport {
    std::vector<EpochRow> rows;
    std::vector<double> initial_eval_loss; // per task, before any update
    bool diverged = false;
    std::string divergence;
    std::uint64_t frozen_fingerprint_before = 0;
    std::uint64_t frozen_fingerprint_after = 0;

    [[nodiscard]] std::vector<const EpochRow*> task_rows(std::size_t task) const {
        std::vector<const EpochRow*> out;
        for (const auto& r : rows)
            if (r.task_id == task) out.push_back(&r);
        return out;
    }
};

namespace detail {

inline std::vector<std::size_t> current_ranks(const MetaTTAdapter& ad) {
    if (ad.is_tt()) return ad.train().interior_ranks();
    return {ad.lora_a().empty() ? 0 : ad.lora_a()[0].extent(1)};
}

struct GradNormAccumulator {
    std::vector<CoreGradNorm> sum;
    std::size_t count = 0;

    void add(const std::vector<CoreGradNorm>& v) {
        if (sum.empty()) sum = v;
        else
            for (std::size_t i = 0; i < v.size(); ++i) sum[i].value += v[i].value;
        ++count;
    }
    [[nodiscard]] std::vector<CoreGradNorm> mean() const {
        auto out = sum;
        for (auto& c : out) c.value /= static_cast<double>(std::max<std::size_t>(count, 1));
        return out;
    }
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void apply_schedule(MetaTTAdapter& adapter, const RankSchedule* schedule, std::size_t epoch,
                           OptimizerState& state, bool& swept) {
    swept = false;
    if (!schedule) return;
    if (auto targets = schedule_lookup(*schedule, epoch)) {
        if (!adapter.is_tt()) throw ConfigError("train: rank schedules need a tensor-train adapter");
        dmrg_sweep(adapter.train(), *targets);
        state.reset(adapter.parameters());
        swept = true;
    }
}

} // namespace detail

/// Single-task fine-tuning of `adapter` against the frozen `model`.
/// Per epoch: seeded shuffle, minibatch forward/backward/clip/AdamW with
/// warmup; a scheduled DMRG sweep (then fresh optimizer moments) right after
/// training; then evaluation.
inline TrainReport train_run(const FrozenTransformer& model, MetaTTAdapter& adapter, const SyntheticTask& task,
                             const OptimizerConfig& cfg, std::size_t epochs, const RankSchedule* schedule,
                             std::uint64_t seed, const TrainOptions& opts = {}) {
    validate_config(cfg);
    if (opts.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    TrainReport report;
    report.frozen_fingerprint_before = model.fingerprint();
    report.frozen_fingerprint_after = report.frozen_fingerprint_before;
    if (epochs == 0) return report;

    const AdaptedModel view = inject_adapter(model, adapter, adapter.spec().target_modules);
    OptimizerState state;
    state.reset(adapter.parameters());
    const std::size_t n = task.train.size();
    const std::size_t batches = (n + opts.batch_size - 1) / opts.batch_size;
    const std::size_t total_steps = batches * epochs;
    Rng rng(derive_seed(seed, 11));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});

    const double initial = evaluate(view, task.kind, task.eval).loss;
    report.initial_eval_loss = {initial};
    std::size_t global_step = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        std::shuffle(perm.begin(), perm.end(), rng);
        detail::GradNormAccumulator norms;
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::span<const std::size_t> rows(perm.data() + b * opts.batch_size,
                                                    std::min(opts.batch_size, n - b * opts.batch_size));
            ForwardTape tape;
            const DenseTensor out = view.forward(task.train.batch(rows), 0, &tape);
            const LossResult loss = task_loss(task.kind, task.train, rows, out);
            loss_sum += loss.value * static_cast<double>(rows.size());
            AdapterGrads grads = view.backward(tape, loss.grad);
            norms.add(core_gradient_norms(adapter, grads));
            if (cfg.clip_max_norm) clip_gradients(grads, *cfg.clip_max_norm);
            ++global_step;
            adamw_step(state, adapter.parameters(), grads, cfg, warmup_scale(global_step, total_steps, cfg.warmup_ratio));
        }
        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / static_cast<double>(n);
        row.grad_norms = norms.mean();
        if (!std::isfinite(row.train_loss)) {
            report.diverged = true;
            report.divergence = "non-finite train loss at epoch " + std::to_string(epoch);
        } else {
            detail::apply_schedule(adapter, schedule, epoch, state, row.swept);
        }
        const EvalResult ev = evaluate(view, task.kind, task.eval);
        row.step = global_step;
        row.eval_loss = ev.loss;
        row.eval_metric = ev.metric;
        row.ranks = detail::current_ranks(adapter);
        row.param_count = adapter.parameter_count();
        row.wallclock_s = detail::seconds_since(t0);
        report.rows.push_back(std::move(row));
        if (report.diverged) break;
        if (opts.early_stop_ratio && ev.loss <= *opts.early_stop_ratio * initial) break;
    }
    report.frozen_fingerprint_after = model.fingerprint();
    return report;
}

/// Joint multi-task training on ℒ = Σ_t ℒ_t. Each optimizer step takes one
/// minibatch per task (round robin, tasks with fewer batches wrap around) and
/// sums their losses. A (4+1)D adapter routes task t through its task core;
/// other variants share one delta across tasks.
inline TrainReport joint_train_run(const FrozenTransformer& model, MetaTTAdapter& adapter,
                                   const std::vector<SyntheticTask>& tasks, const OptimizerConfig& cfg,
                                   std::size_t epochs, std::uint64_t seed, const TrainOptions& opts = {},
                                   const RankSchedule* schedule = nullptr) {
    validate_config(cfg);
    if (tasks.empty()) throw ConfigError("joint_train_run: no tasks");
    if (opts.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    const bool task_core = adapter.variant() == Variant::TT4plus1D;
    if (task_core && adapter.spec().num_tasks != tasks.size()) {
        throw ShapeError("joint_train_run: adapter has " + std::to_string(adapter.spec().num_tasks) + " task slices, " +
                         std::to_string(tasks.size()) + " tasks given");
    }
    TrainReport report;
    report.frozen_fingerprint_before = model.fingerprint();
    report.frozen_fingerprint_after = report.frozen_fingerprint_before;
    if (epochs == 0) return report;

    const AdaptedModel view = inject_adapter(model, adapter, adapter.spec().target_modules);
    const std::size_t T = tasks.size();
    auto route = [&](std::size_t t) { return task_core ? t : std::size_t{0}; };

    OptimizerState state;
    state.reset(adapter.parameters());
    std::vector<std::vector<std::size_t>> perms(T);
    std::vector<std::size_t> batches(T);
    std::size_t steps_per_epoch = 0;
    for (std::size_t t = 0; t < T; ++t) {
        perms[t].resize(tasks[t].train.size());
        std::iota(perms[t].begin(), perms[t].end(), std::size_t{0});
        batches[t] = (tasks[t].train.size() + opts.batch_size - 1) / opts.batch_size;
        if (batches[t] == 0) throw ConfigError("joint_train_run: task " + std::to_string(t) + " has no training data");
        steps_per_epoch = std::max(steps_per_epoch, batches[t]);
    }
    const std::size_t total_steps = steps_per_epoch * epochs;
    Rng rng(derive_seed(seed, 13));
    for (std::size_t t = 0; t < T; ++t) report.initial_eval_loss.push_back(evaluate(view, tasks[t].kind, tasks[t].eval, route(t)).loss);

    std::size_t global_step = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        for (auto& p : perms) std::shuffle(p.begin(), p.end(), rng);
        detail::GradNormAccumulator norms;
        std::vector<double> loss_sum(T, 0.0);
        std::vector<std::size_t> seen(T, 0);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            AdapterGrads grads = zero_grads(adapter);
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t b = s % batches[t];
                const std::size_t n = perms[t].size();
                const std::span<const std::size_t> rows(perms[t].data() + b * opts.batch_size,
                                                        std::min(opts.batch_size, n - b * opts.batch_size));
                ForwardTape tape;
                const DenseTensor out = view.forward(tasks[t].train.batch(rows), route(t), &tape);
                const LossResult loss = task_loss(tasks[t].kind, tasks[t].train, rows, out);
                loss_sum[t] += loss.value * static_cast<double>(rows.size());
                seen[t] += rows.size();
                const AdapterGrads g = view.backward(tape, loss.grad);
                for (std::size_t i = 0; i < grads.size(); ++i) add_in_place(grads[i], g[i]);
            }
            norms.add(core_gradient_norms(adapter, grads));
            if (cfg.clip_max_norm) clip_gradients(grads, *cfg.clip_max_norm);
            ++global_step;
            adamw_step(state, adapter.parameters(), grads, cfg, warmup_scale(global_step, total_steps, cfg.warmup_ratio));
        }
        bool finite = true;
        for (std::size_t t = 0; t < T; ++t) finite = finite && std::isfinite(loss_sum[t]);
        bool swept = false;
        if (!finite) {
            report.diverged = true;
            report.divergence = "non-finite train loss at epoch " + std::to_string(epoch);
        } else {
            detail::apply_schedule(adapter, schedule, epoch, state, swept);
        }
        const auto grad_means = norms.mean();
        for (std::size_t t = 0; t < T; ++t) {
            const EvalResult ev = evaluate(view, tasks[t].kind, tasks[t].eval, route(t));
            EpochRow row;
            row.epoch = epoch;
            row.step = global_step;
            row.task_id = t;
            row.train_loss = loss_sum[t] / static_cast<double>(std::max<std::size_t>(seen[t], 1));
            row.eval_loss = ev.loss;
            row.eval_metric = ev.metric;
            row.ranks = detail::current_ranks(adapter);
            row.param_count = adapter.parameter_count();
            row.grad_norms = grad_means;
            row.wallclock_s = detail::seconds_since(t0);
            row.swept = swept;
            report.rows.push_back(std::move(row));
        }
        if (report.diverged) break;
    }
    report.frozen_fingerprint_after = model.fingerprint();
    return report;
}

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t entries_checked = 0;
    std::string worst_parameter;
};

/// Central finite differences over every trainable entry, compared with
/// backward(). Error per entry is |g − fd| / max(1, |g|).
inline GradCheckResult gradient_check(const FrozenTransformer& model, MetaTTAdapter& adapter, const TokenBatch& batch,
                                      const DenseTensor& targets, std::size_t task = 0, double eps = 1e-6) {
    const AdaptedModel view = inject_adapter(model, adapter, adapter.spec().target_modules);
    ForwardTape tape;
    const DenseTensor out = view.forward(batch, task, &tape);
    const AdapterGrads grads = view.backward(tape, mse_loss(out, targets).grad);

    auto loss_at = [&] { return mse_loss(view.forward(batch, task), targets).value; };
    GradCheckResult res;
    const auto params = adapter.parameters();
    const auto names = adapter.parameter_names();
    for (std::size_t p = 0; p < params.size(); ++p) {
        DenseTensor& w = *params[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + eps;
            const double up = loss_at();
            w[i] = saved - eps;
            const double down = loss_at();
            w[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double err = std::abs(grads[p][i] - fd) / std::max(1.0, std::abs(grads[p][i]));
            if (err > res.max_relative_error) {
                res.max_relative_error = err;
                res.worst_parameter = names[p] + "[" + std::to_string(i) + "]";
            }
            ++res.entries_checked;
        }
    }
    return res;
}

} // namespace ttadapt
