#pragma once

// Reference computations used as test oracles. They avoid the library's
// contraction and SVD code paths on purpose.

#include "ttadapt/adapter.hpp"
#include "ttadapt/tensor.hpp"
#include "ttadapt/tensor_train.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <vector>

namespace oracle {

using ttadapt::DenseTensor;
using ttadapt::TensorTrain;

/// One tensor entry as a row vector pushed through every core slice.
inline double tt_entry(const TensorTrain& tt, const std::vector<std::size_t>& idx) {
    std::vector<double> row{1.0};
    for (std::size_t k = 0; k < tt.order(); ++k) {
        const DenseTensor& c = tt.core(k).values();
        const std::size_t rl = c.extent(0), rr = c.extent(2);
        std::vector<double> next(rr, 0.0);
        for (std::size_t a = 0; a < rl; ++a)
            for (std::size_t b = 0; b < rr; ++b) next[b] += row[a] * c(a, idx[k], b);
        row = next;
    }
    return row[0];
}

/// Row-major flat offset of a multi-index.
inline std::size_t flat(const std::vector<std::size_t>& modes, const std::vector<std::size_t>& idx) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < modes.size(); ++k) off = off * modes[k] + idx[k];
    return off;
}

inline bool next_index(const std::vector<std::size_t>& modes, std::vector<std::size_t>& idx) {
    for (std::size_t k = modes.size(); k-- > 0;) {
        if (++idx[k] < modes[k]) return true;
        idx[k] = 0;
    }
    return false;
}

inline std::vector<double> dense_by_entries(const TensorTrain& tt) {
    const auto modes = tt.mode_sizes();
    std::vector<double> out;
    std::vector<std::size_t> idx(modes.size(), 0);
    do out.push_back(tt_entry(tt, idx));
    while (next_index(modes, idx));
    return out;
}

/// ΔW for one site read straight out of the dense adapter tensor.
inline DenseTensor materialized_delta(const ttadapt::MetaTTAdapter& ad, const ttadapt::SiteKey& key) {
    using ttadapt::Variant;
    const auto& s = ad.spec();
    DenseTensor out = DenseTensor::matrix(s.d_in, s.d_out);
    if (!ad.is_tt()) {
        const std::size_t site = key.layer * s.num_modules() + key.module;
        const DenseTensor& a = ad.lora_a()[site];
        const DenseTensor& b = ad.lora_b()[site];
        for (std::size_t i = 0; i < s.d_in; ++i)
            for (std::size_t j = 0; j < s.d_out; ++j)
                for (std::size_t r = 0; r < a.extent(1); ++r) out(i, j) += a(i, r) * b(r, j);
        return out;
    }
    const TensorTrain& tt = ad.train();
    for (std::size_t i = 0; i < s.d_in; ++i)
        for (std::size_t j = 0; j < s.d_out; ++j) {
            switch (s.variant) {
            case Variant::TT4D: out(i, j) = tt_entry(tt, {i, key.layer, key.module, j}); break;
            case Variant::TT4plus1D: out(i, j) = tt_entry(tt, {i, key.layer, key.task, key.module, j}); break;
            case Variant::TT5D: {
                const std::size_t block = s.d_out / s.num_heads;
                out(i, j) = tt_entry(tt, {i, key.layer, key.module, j / block, j % block});
                break;
            }
            default: break;
            }
        }
    return out;
}

inline Eigen::MatrixXd to_eigen(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = v[i * cols + j];
    return m;
}

/// Classic left-to-right TT-SVD of a dense row-major tensor with per-bond
/// rank caps; returns the Frobenius error of the resulting approximation.
inline double tt_svd_error(const std::vector<double>& dense, const std::vector<std::size_t>& modes,
                           const std::vector<std::size_t>& caps) {
    const std::size_t d = modes.size();
    std::vector<std::vector<double>> cores; // row-major (r_{k-1}·n_k) × r_k
    std::vector<std::size_t> ranks{1};
    std::vector<double> rest = dense;
    for (std::size_t k = 0; k + 1 < d; ++k) {
        const std::size_t rows = ranks.back() * modes[k];
        const std::size_t cols = rest.size() / rows;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(rest, rows, cols), Eigen::ComputeThinU | Eigen::ComputeThinV);
        const std::size_t r = std::min<std::size_t>(caps[k], static_cast<std::size_t>(svd.singularValues().size()));
        std::vector<double> core(rows * r);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t a = 0; a < r; ++a) core[i * r + a] = svd.matrixU()(i, a);
        std::vector<double> carry(r * cols);
        for (std::size_t a = 0; a < r; ++a)
            for (std::size_t c = 0; c < cols; ++c) carry[a * cols + c] = svd.singularValues()(a) * svd.matrixV()(c, a);
        cores.push_back(std::move(core));
        ranks.push_back(r);
        rest = std::move(carry);
    }
    std::vector<double> acc = cores[0]; // lead × r
    std::size_t lead = modes[0];
    for (std::size_t k = 1; k + 1 < d; ++k) {
        const std::size_t rl = ranks[k], n = modes[k], rr = ranks[k + 1];
        std::vector<double> next(lead * n * rr, 0.0);
        for (std::size_t p = 0; p < lead; ++p)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t a = 0; a < rl; ++a)
                    for (std::size_t b = 0; b < rr; ++b)
                        next[(p * n + i) * rr + b] += acc[p * rl + a] * cores[k][(a * n + i) * rr + b];
        acc = std::move(next);
        lead *= n;
    }
    const std::size_t ra = ranks[d - 1], nd = modes[d - 1];
    double err2 = 0.0;
    for (std::size_t p = 0; p < lead; ++p)
        for (std::size_t j = 0; j < nd; ++j) {
            double v = 0.0;
            for (std::size_t a = 0; a < ra; ++a) v += acc[p * ra + a] * rest[a * nd + j];
            const double e = v - dense[p * nd + j];
            err2 += e * e;
        }
    return std::sqrt(err2);
}

} // namespace oracle

namespace oracle {

inline void randomize(ttadapt::MetaTTAdapter& ad, std::uint64_t seed, double sd = 0.5) {
    ttadapt::Rng rng(seed);
    for (ttadapt::DenseTensor* p : ad.parameters()) ttadapt::fill_normal(*p, rng, 0.0, sd);
}

inline ttadapt::AdapterSpec small_spec(ttadapt::Variant v, std::size_t d = 6, std::size_t layers = 3) {
    ttadapt::AdapterSpec s;
    s.variant = v;
    s.d_in = s.d_out = d;
    s.num_layers = layers;
    s.target_modules = {ttadapt::ProjModule::Q, ttadapt::ProjModule::V};
    s.num_heads = 2;
    s.num_tasks = 3;
    s.bond_ranks = {3};
    s.alpha = 1.25;
    return s;
}

inline std::vector<ttadapt::SiteKey> all_sites(const ttadapt::AdapterSpec& s) {
    std::vector<ttadapt::SiteKey> out;
    const std::size_t tasks = s.variant == ttadapt::Variant::TT4plus1D ? s.num_tasks : 1;
    for (std::size_t l = 0; l < s.num_layers; ++l)
        for (std::size_t m = 0; m < s.num_modules(); ++m)
            for (std::size_t t = 0; t < tasks; ++t) out.push_back({l, m, t});
    return out;
}

inline const std::vector<ttadapt::Variant> kAllVariants{ttadapt::Variant::TT4D, ttadapt::Variant::TT5D,
                                                        ttadapt::Variant::TT4plus1D, ttadapt::Variant::LoRA};

} // namespace oracle
