#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/model.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/svd.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ttadapt {

enum class TaskKind { TeacherRegression, TeacherClassification };

inline std::string to_string(TaskKind k) {
    return k == TaskKind::TeacherRegression ? "teacher_regression" : "teacher_classification";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "teacher_regression" || s == "regression") return TaskKind::TeacherRegression;
    if (s == "teacher_classification" || s == "classification") return TaskKind::TeacherClassification;
    throw ConfigError("unknown task kind '" + s + "'");
}

/// A fixed set of sequences with teacher targets. Regression targets are
/// teacher outputs; classification targets are teacher argmax labels.
struct Dataset {
    std::size_t seq_len = 0;
    std::vector<std::vector<std::uint32_t>> inputs;
    DenseTensor targets; // n × outputs (regression)
    std::vector<std::size_t> labels; // classification

    [[nodiscard]] std::size_t size() const noexcept { return inputs.size(); }

    [[nodiscard]] TokenBatch batch(std::span<const std::size_t> rows) const {
        TokenBatch b{rows.size(), seq_len, {}};
        b.tokens.reserve(rows.size() * seq_len);
        for (std::size_t r : rows) b.tokens.insert(b.tokens.end(), inputs[r].begin(), inputs[r].end());
        return b;
    }
};

struct SyntheticTask {
    TaskKind kind = TaskKind::TeacherRegression;
    Dataset train;
    Dataset eval;
    /// The additive MetaTT-4D perturbation at {Q,V} that defines the teacher.
    MetaTTAdapter teacher;
};

struct TeacherTaskSpec {
    TaskKind kind = TaskKind::TeacherRegression;
    std::size_t delta_rank = 4;
    double delta_scale = 0.1;
    std::size_t n_train = 2000;
    std::size_t n_eval = 500;
    std::size_t seq_len = 0; // 0: model max_seq_len
    std::uint64_t seed = 0;

    bool operator==(const TeacherTaskSpec&) const = default;
};

namespace detail {

inline Dataset sample_dataset(const FrozenTransformer& model, const MetaTTAdapter& teacher, TaskKind kind, std::size_t n,
                              std::size_t seq_len, Rng& rng) {
    Dataset ds;
    ds.seq_len = seq_len;
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(model.config.vocab_size - 1));
    ds.inputs.resize(n);
    for (auto& seq : ds.inputs) {
        seq.resize(seq_len);
        for (auto& t : seq) t = tok(rng);
    }
    const AdaptedModel teacher_model = inject_adapter(model, teacher, teacher.spec().target_modules);
    const std::size_t outputs = model.config.num_outputs;
    ds.targets = DenseTensor::matrix(std::max<std::size_t>(n, 1), outputs);
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> rows;
        for (std::size_t r = start; r < std::min(n, start + chunk); ++r) rows.push_back(r);
        const DenseTensor out = teacher_model.forward(ds.batch(rows));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < outputs; ++j) ds.targets(rows[i], j) = out(i, j);
    }
    if (kind == TaskKind::TeacherClassification) {
        ds.labels.resize(n);
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < outputs; ++j)
                if (ds.targets(r, j) > ds.targets(r, best)) best = j;
            ds.labels[r] = best;
        }
    }
    return ds;
}

// Rescales 𝒢₁ so the root-mean-square over sites of ‖α·ΔW‖_F / ‖W‖_F equals `scale`.
inline void normalize_teacher(const FrozenTransformer& model, MetaTTAdapter& teacher, double scale) {
    const AdapterSpec& s = teacher.spec();
    double sum = 0.0;
    std::size_t sites = 0;
    for (std::size_t l = 0; l < s.num_layers; ++l)
        for (std::size_t m = 0; m < s.num_modules(); ++m) {
            const double dn = s.alpha * frobenius_norm(delta_matrix(teacher, {l, m, 0}));
            const double wn = frobenius_norm(model.weight(l, s.target_modules[m]));
            sum += (dn / wn) * (dn / wn);
            ++sites;
        }
    const double rms = std::sqrt(sum / static_cast<double>(sites));
    scale_in_place(teacher.train().core(0).values(), rms > 0.0 ? scale / rms : 0.0);
}

} // namespace detail

/// Random MetaTT-4D teacher delta at {Q,V}. The boundary factors of each
/// teacher are orthogonal to those of every other teacher in `count`.
inline std::vector<MetaTTAdapter> make_teacher_deltas(const FrozenTransformer& model, std::size_t count,
                                                      std::size_t delta_rank, std::uint64_t seed) {
    if (delta_rank < 1) throw ConfigError("teacher: delta_rank must be >= 1");
    const std::size_t D = model.config.hidden_dim;
    if (count * delta_rank > D) throw ConfigError("teacher: count × delta_rank exceeds hidden_dim");
    Rng rng(seed);
    // Orthonormal bases for the input and output sides, split into per-teacher blocks.
    const SvdResult in_basis = svd(random_normal({D, count * delta_rank}, rng));
    const SvdResult out_basis = svd(random_normal({D, count * delta_rank}, rng));

    std::vector<MetaTTAdapter> out;
    for (std::size_t t = 0; t < count; ++t) {
        AdapterSpec spec;
        spec.variant = Variant::TT4D;
        spec.d_in = spec.d_out = D;
        spec.num_layers = model.config.num_layers;
        spec.target_modules = {ProjModule::Q, ProjModule::V};
        spec.bond_ranks = {delta_rank};
        spec.alpha = 1.0;
        spec.init_strategy = {InitTag::Zero, InitTag::Normal, InitTag::Normal, InitTag::Zero};
        spec.seed = derive_seed(seed, 100 + t);
        MetaTTAdapter teacher = build(spec);
        TensorTrain& tt = teacher.train();
        for (std::size_t i = 0; i < D; ++i)
            for (std::size_t c = 0; c < delta_rank; ++c) {
                tt.core(0).values()(0, i, c) = in_basis.u(i, t * delta_rank + c);
                tt.core(3).values()(c, i, 0) = out_basis.u(i, t * delta_rank + c) * std::sqrt(static_cast<double>(D));
            }
        out.push_back(std::move(teacher));
    }
    return out;
}

inline SyntheticTask make_teacher_task_from(const FrozenTransformer& model, MetaTTAdapter teacher,
                                            const TeacherTaskSpec& spec) {
    detail::normalize_teacher(model, teacher, spec.delta_scale);
    const std::size_t seq_len = spec.seq_len ? spec.seq_len : model.config.max_seq_len;
    Rng rng(derive_seed(spec.seed, 7));
    SyntheticTask task;
    task.kind = spec.kind;
    task.train = detail::sample_dataset(model, teacher, spec.kind, spec.n_train, seq_len, rng);
    task.eval = detail::sample_dataset(model, teacher, spec.kind, spec.n_eval, seq_len, rng);
    task.teacher = std::move(teacher);
    return task;
}

/// Teacher–student task: targets come from the frozen model plus a random
/// rank-`delta_rank` MetaTT-4D delta at {Q,V}.
inline SyntheticTask make_teacher_task(const FrozenTransformer& model, const TeacherTaskSpec& spec) {
    auto deltas = make_teacher_deltas(model, 1, spec.delta_rank, spec.seed);
    return make_teacher_task_from(model, std::move(deltas[0]), spec);
}

/// `count` tasks whose teacher deltas act on mutually orthogonal subspaces.
inline std::vector<SyntheticTask> make_teacher_tasks(const FrozenTransformer& model, std::size_t count,
                                                     const TeacherTaskSpec& spec) {
    auto deltas = make_teacher_deltas(model, count, spec.delta_rank, spec.seed);
    std::vector<SyntheticTask> out;
    for (std::size_t t = 0; t < count; ++t) {
        TeacherTaskSpec s = spec;
        s.seed = derive_seed(spec.seed, 1000 + t);
        out.push_back(make_teacher_task_from(model, std::move(deltas[t]), s));
    }
    return out;
}

} // namespace ttadapt
