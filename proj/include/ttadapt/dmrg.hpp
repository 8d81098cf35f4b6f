#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/svd.hpp"
#include "ttadapt/tensor.hpp"
#include "ttadapt/tensor_train.hpp"

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace ttadapt {

/// Contracts bond k (1 ≤ k ≤ d-1) joining cores k-1 and k.
/// Result is (r_{k-1}·n_{k-1}) × (n_k·r_{k+1}) in row-major order.
inline DenseTensor merge_adjacent(const TensorTrain& tt, std::size_t bond) {
    if (bond < 1 || bond >= tt.order()) {
        throw ShapeError("merge_adjacent: bond " + std::to_string(bond) + " out of range [1," +
                         std::to_string(tt.order() - 1) + "]");
    }
    const TTCore& left = tt.core(bond - 1);
    const TTCore& right = tt.core(bond);
    if (left.right_rank() != right.left_rank()) {
        throw ShapeError("merge_adjacent: bond " + std::to_string(bond) + " ranks disagree");
    }
    const DenseTensor lm = left.values().reshaped({left.left_rank() * left.mode_size(), left.right_rank()});
    const DenseTensor rm = right.values().reshaped({right.left_rank(), right.mode_size() * right.right_rank()});
    return matmul(lm, rm);
}

namespace detail {

enum class Absorb { Right, Left };

inline void split_bond(TensorTrain& tt, std::size_t bond, std::size_t target, Absorb absorb) {
    TTCore& left = tt.core(bond - 1);
    TTCore& right = tt.core(bond);
    const std::size_t ra = left.left_rank(), na = left.mode_size();
    const std::size_t nb = right.mode_size(), rb = right.right_rank();
    const DenseTensor merged = merge_adjacent(tt, bond);

    SvdResult f;
    try {
        f = truncated_svd(merged, std::min(target, left.right_rank()));
    } catch (const NumericalError& e) {
        throw NumericalError("dmrg_sweep: bond " + std::to_string(bond) + ": " + e.what());
    }
    const std::size_t k = f.rank();
    DenseTensor u = std::move(f.u);
    DenseTensor vt = std::move(f.vt);
    if (absorb == Absorb::Right) {
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < vt.extent(1); ++j) vt(i, j) *= f.s[i];
    } else {
        for (std::size_t i = 0; i < u.extent(0); ++i)
            for (std::size_t j = 0; j < k; ++j) u(i, j) *= f.s[j];
    }
    left = TTCore(std::move(u).reshaped({ra, na, k}));
    right = TTCore(std::move(vt).reshaped({k, nb, rb}));
}

} // namespace detail

/// DMRG-inspired double sweep, in place.
///
/// Forward pass over bonds 1..d-1 keeps 𝒢_left ← U, 𝒢_right ← S·Vᵀ; the
/// backward pass over bonds d-1..1 keeps 𝒢_left ← U·S, 𝒢_right ← Vᵀ. Each
/// bond is truncated to min(target, current rank, merged-matrix min dimension).
/// `targets` holds one entry per interior bond, or a single uniform entry.
/// Any optimizer state tied to the old core shapes is invalid afterwards.
inline void dmrg_sweep(TensorTrain& tt, const std::vector<std::size_t>& targets) {
    require_valid(tt, "dmrg_sweep");
    const std::size_t d = tt.order();
    std::vector<std::size_t> per_bond = targets;
    if (per_bond.size() == 1) per_bond.assign(d - 1, targets[0]);
    if (per_bond.size() != d - 1) {
        throw ShapeError("dmrg_sweep: expected " + std::to_string(d - 1) + " bond targets, got " +
                         std::to_string(targets.size()));
    }
    for (std::size_t r : per_bond)
        if (r < 1) throw ShapeError("dmrg_sweep: bond targets must be >= 1");

    for (std::size_t bond = 1; bond <= d - 1; ++bond)
        detail::split_bond(tt, bond, per_bond[bond - 1], detail::Absorb::Right);
    for (std::size_t bond = d - 1; bond >= 1; --bond)
        detail::split_bond(tt, bond, per_bond[bond - 1], detail::Absorb::Left);
}

struct ScheduleEntry {
    std::size_t epoch = 0;
    std::vector<std::size_t> ranks;

    bool operator==(const ScheduleEntry&) const = default;
};

/// Epoch → target bond ranks. Epochs strictly increase, ranks never grow.
class RankSchedule {
public:
    RankSchedule() = default;
    explicit RankSchedule(std::vector<ScheduleEntry> entries) : entries_(std::move(entries)) { validate(); }

    [[nodiscard]] const std::vector<ScheduleEntry>& entries() const noexcept { return entries_; }
    [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }

    bool operator==(const RankSchedule&) const = default;

private:
    void validate() const {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& e = entries_[i];
            if (e.ranks.empty()) throw ConfigError("rank schedule: entry " + std::to_string(i) + " has no ranks");
            for (std::size_t r : e.ranks)
                if (r < 1) throw ConfigError("rank schedule: ranks must be >= 1");
            if (i == 0) continue;
            const auto& p = entries_[i - 1];
            if (e.epoch <= p.epoch) throw ConfigError("rank schedule: epochs must be strictly increasing");
            if (e.ranks.size() != p.ranks.size()) throw ConfigError("rank schedule: entries disagree on bond count");
            for (std::size_t b = 0; b < e.ranks.size(); ++b) {
                if (e.ranks[b] > p.ranks[b]) {
                    throw ConfigError("rank schedule: rank at bond " + std::to_string(b + 1) + " grows from " +
                                      std::to_string(p.ranks[b]) + " to " + std::to_string(e.ranks[b]) +
                                      " at epoch " + std::to_string(e.epoch));
                }
            }
        }
    }

    std::vector<ScheduleEntry> entries_;
};

inline std::optional<std::vector<std::size_t>> schedule_lookup(const RankSchedule& schedule, std::size_t epoch) {
    for (const auto& e : schedule.entries())
        if (e.epoch == epoch) return e.ranks;
    return std::nullopt;
}

/// 8 → 6 → 4 (after a start at rank 10) at evenly spaced epochs over `total_epochs`.
inline RankSchedule default_rank_schedule(std::size_t num_bonds, std::size_t total_epochs) {
    const std::size_t targets[] = {8, 6, 4};
    const std::size_t step = std::max<std::size_t>(1, total_epochs / 4);
    std::vector<ScheduleEntry> entries;
    for (std::size_t i = 0; i < 3; ++i) entries.push_back({step * (i + 1), std::vector<std::size_t>(num_bonds, targets[i])});
    return RankSchedule(std::move(entries));
}

inline constexpr std::size_t kDefaultScheduleStartRank = 10;

} // namespace ttadapt
