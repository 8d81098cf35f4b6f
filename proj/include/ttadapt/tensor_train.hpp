#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ttadapt {

/// Order-3 core of shape (left_rank, mode_size, right_rank).
class TTCore {
public:
    TTCore() : values_(Shape{1, 1, 1}) {}
    TTCore(std::size_t left_rank, std::size_t mode_size, std::size_t right_rank)
        : values_(Shape{left_rank, mode_size, right_rank}) {}
    explicit TTCore(DenseTensor values) : values_(std::move(values)) {
        if (values_.rank() != 3) throw ShapeError("TTCore: expected order-3 values, got " + shape_to_string(values_.shape()));
    }

    [[nodiscard]] std::size_t left_rank() const noexcept { return values_.shape()[0]; }
    [[nodiscard]] std::size_t mode_size() const noexcept { return values_.shape()[1]; }
    [[nodiscard]] std::size_t right_rank() const noexcept { return values_.shape()[2]; }

    [[nodiscard]] const DenseTensor& values() const noexcept { return values_; }
    [[nodiscard]] DenseTensor& values() noexcept { return values_; }

    /// Matrix slice 𝒢[i] of shape left_rank × right_rank.
    [[nodiscard]] DenseTensor slice(std::size_t i) const {
        if (i >= mode_size()) {
            throw ShapeError("TTCore::slice: index " + std::to_string(i) + " out of range for mode size " +
                             std::to_string(mode_size()));
        }
        const std::size_t rl = left_rank(), n = mode_size(), rr = right_rank();
        DenseTensor out = DenseTensor::matrix(rl, rr);
        for (std::size_t a = 0; a < rl; ++a)
            for (std::size_t b = 0; b < rr; ++b) out(a, b) = values_.data()[(a * n + i) * rr + b];
        return out;
    }

    void set_slice(std::size_t i, const DenseTensor& m) {
        if (i >= mode_size() || m.rank() != 2 || m.extent(0) != left_rank() || m.extent(1) != right_rank()) {
            throw ShapeError("TTCore::set_slice: bad index or slice shape " + shape_to_string(m.shape()));
        }
        const std::size_t rl = left_rank(), n = mode_size(), rr = right_rank();
        for (std::size_t a = 0; a < rl; ++a)
            for (std::size_t b = 0; b < rr; ++b) values_.data()[(a * n + i) * rr + b] = m(a, b);
    }

    /// First core viewed as n × r (requires left_rank 1).
    [[nodiscard]] DenseTensor as_left_boundary() const { return values_.reshaped({left_rank() * mode_size(), right_rank()}); }
    /// Last core viewed as r × n (requires right_rank 1).
    [[nodiscard]] DenseTensor as_right_boundary() const { return values_.reshaped({left_rank(), mode_size() * right_rank()}); }

    bool operator==(const TTCore&) const = default;

private:
    DenseTensor values_;
};

/// Outcome of validate_chain. `bond` follows the r_k numbering: bond 0 is the
/// left boundary, bond d the right boundary, bond k joins cores k-1 and k.
struct ChainReport {
    bool ok = true;
    std::optional<std::size_t> bond;
    std::string message;

    explicit operator bool() const noexcept { return ok; }
};

/// 𝒢[i₁,…,i_d] = 𝒢₁[i₁]𝒢₂[i₂]⋯𝒢_d[i_d]
class TensorTrain {
public:
    TensorTrain() = default;
    explicit TensorTrain(std::vector<TTCore> cores) : cores_(std::move(cores)) {}

    /// Zero-filled train with the given modes and interior bond ranks (size d-1).
    static TensorTrain zeros(std::span<const std::size_t> modes, std::span<const std::size_t> interior_ranks) {
        if (modes.size() < 2) throw ShapeError("TensorTrain: need at least two modes");
        if (interior_ranks.size() + 1 != modes.size()) {
            throw ShapeError("TensorTrain: expected " + std::to_string(modes.size() - 1) + " interior ranks, got " +
                             std::to_string(interior_ranks.size()));
        }
        std::vector<TTCore> cores;
        cores.reserve(modes.size());
        for (std::size_t k = 0; k < modes.size(); ++k) {
            const std::size_t rl = k == 0 ? 1 : interior_ranks[k - 1];
            const std::size_t rr = k + 1 == modes.size() ? 1 : interior_ranks[k];
            cores.emplace_back(rl, modes[k], rr);
        }
        return TensorTrain(std::move(cores));
    }

    static TensorTrain random(std::span<const std::size_t> modes, std::span<const std::size_t> interior_ranks, Rng& rng,
                              double stddev = 1.0) {
        TensorTrain tt = zeros(modes, interior_ranks);
        for (auto& c : tt.cores_) fill_normal(c.values(), rng, 0.0, stddev);
        return tt;
    }

    [[nodiscard]] std::size_t order() const noexcept { return cores_.size(); }
    [[nodiscard]] const std::vector<TTCore>& cores() const noexcept { return cores_; }
    [[nodiscard]] std::vector<TTCore>& cores() noexcept { return cores_; }
    [[nodiscard]] const TTCore& core(std::size_t k) const { return cores_.at(k); }
    [[nodiscard]] TTCore& core(std::size_t k) { return cores_.at(k); }

    [[nodiscard]] std::vector<std::size_t> mode_sizes() const {
        std::vector<std::size_t> out;
        for (const auto& c : cores_) out.push_back(c.mode_size());
        return out;
    }

    /// r_0, …, r_d (boundary ranks included).
    [[nodiscard]] std::vector<std::size_t> ranks() const {
        std::vector<std::size_t> out;
        if (cores_.empty()) return out;
        out.push_back(cores_.front().left_rank());
        for (const auto& c : cores_) out.push_back(c.right_rank());
        return out;
    }

    /// r_1, …, r_{d-1}.
    [[nodiscard]] std::vector<std::size_t> interior_ranks() const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k + 1 < cores_.size(); ++k) out.push_back(cores_[k].right_rank());
        return out;
    }

    bool operator==(const TensorTrain&) const = default;

private:
    std::vector<TTCore> cores_;
};

inline ChainReport validate_chain(const TensorTrain& tt) {
    const auto& cores = tt.cores();
    if (cores.size() < 2) return {false, std::nullopt, "train has " + std::to_string(cores.size()) + " cores, need >= 2"};
    if (cores.front().left_rank() != 1) {
        return {false, 0,
                "left boundary bond 0 has rank " + std::to_string(cores.front().left_rank()) + ", expected 1"};
    }
    for (std::size_t k = 0; k + 1 < cores.size(); ++k) {
        if (cores[k].right_rank() != cores[k + 1].left_rank()) {
            return {false, k + 1,
                    "bond " + std::to_string(k + 1) + " mismatch: core " + std::to_string(k) + " right rank " +
                        std::to_string(cores[k].right_rank()) + " vs core " + std::to_string(k + 1) + " left rank " +
                        std::to_string(cores[k + 1].left_rank())};
        }
    }
    if (cores.back().right_rank() != 1) {
        return {false, cores.size(),
                "right boundary bond " + std::to_string(cores.size()) + " has rank " +
                    std::to_string(cores.back().right_rank()) + ", expected 1"};
    }
    return {};
}

inline void require_valid(const TensorTrain& tt, const char* op) {
    if (auto rep = validate_chain(tt); !rep) throw ShapeError(std::string(op) + ": invalid train: " + rep.message);
}

/// 𝒢₁ · 𝒢₂[i₂] ⋯ 𝒢_{d-1}[i_{d-1}] · 𝒢_d with the boundary modes left open,
/// contracted left to right. Result is n₁ × n_d.
inline DenseTensor select_slice(const TensorTrain& tt, std::span<const std::size_t> interior) {
    require_valid(tt, "select_slice");
    const std::size_t d = tt.order();
    if (d < 3) throw ShapeError("select_slice: train needs at least 3 cores");
    if (interior.size() != d - 2) {
        throw ShapeError("select_slice: expected " + std::to_string(d - 2) + " interior indices, got " +
                         std::to_string(interior.size()));
    }
    for (std::size_t p = 0; p < interior.size(); ++p) {
        if (interior[p] >= tt.core(p + 1).mode_size()) {
            throw ShapeError("select_slice: index " + std::to_string(interior[p]) + " out of range at mode position " +
                             std::to_string(p + 1) + " (size " + std::to_string(tt.core(p + 1).mode_size()) + ")");
        }
    }
    DenseTensor acc = tt.core(0).as_left_boundary();
    for (std::size_t p = 0; p < interior.size(); ++p) acc = matmul(acc, tt.core(p + 1).slice(interior[p]));
    return matmul(acc, tt.core(d - 1).as_right_boundary());
}

inline constexpr std::size_t kDenseElementCap = 10'000'000;

/// Full tensor of shape (n₁,…,n_d). Test-oracle scale only.
inline DenseTensor reconstruct_dense(const TensorTrain& tt, std::size_t element_cap = kDenseElementCap) {
    require_valid(tt, "reconstruct_dense");
    const Shape modes = tt.mode_sizes();
    if (shape_product(modes) > element_cap) {
        throw ShapeError("reconstruct_dense: " + std::to_string(shape_product(modes)) + " elements exceed cap " +
                         std::to_string(element_cap));
    }
    // acc: (n₁⋯n_k) × r_k
    DenseTensor acc = tt.core(0).as_left_boundary();
    for (std::size_t k = 1; k < tt.order(); ++k) {
        const TTCore& c = tt.core(k);
        DenseTensor next = matmul(acc, c.values().reshaped({c.left_rank(), c.mode_size() * c.right_rank()}));
        acc = std::move(next).reshaped({acc.extent(0) * c.mode_size(), c.right_rank()});
    }
    return std::move(acc).reshaped(modes);
}

/// Σ_k r_{k-1}·n_k·r_k
inline std::size_t param_count(const TensorTrain& tt) {
    std::size_t n = 0;
    for (const auto& c : tt.cores()) n += c.values().size();
    return n;
}

} // namespace ttadapt
