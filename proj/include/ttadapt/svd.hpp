#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

namespace ttadapt {

/// Thin singular value decomposition m = u · diag(s) · vt.
///
/// Singular values are sorted nonincreasing (ties keep original column order).
/// Each column of u has its largest-magnitude entry nonnegative; the matching
/// row of vt carries the compensating sign.
struct SvdResult {
    DenseTensor u;  // m × k
    std::vector<double> s;
    DenseTensor vt; // k × n

    [[nodiscard]] std::size_t rank() const noexcept { return s.size(); }
};

struct SvdOptions {
    /// Sweep cap; 0 selects 100·min(m,n).
    std::size_t max_sweeps = 0;
    /// Relative off-diagonal threshold |aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖.
    double tolerance = 1e-12;
};

namespace detail {

// One-sided (Hestenes) Jacobi on a tall matrix given as its columns.
// cols: n rows of length m (each row one column of A). Returns V as rows (columns of V).
inline std::vector<double> jacobi_orthogonalize(std::vector<double>& cols, std::size_t m, std::size_t n,
                                                const SvdOptions& opts) {
    std::vector<double> vcols(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) vcols[i * n + i] = 1.0;

    double norm2 = 0.0;
    for (double v : cols) norm2 += v * v;
    const double eps = std::numeric_limits<double>::epsilon();
    const double tiny = norm2 * eps * eps * 1e-4;

    const std::size_t cap = opts.max_sweeps ? opts.max_sweeps : 100 * std::max<std::size_t>(1, std::min(m, n));
    bool converged = n < 2;
    for (std::size_t sweep = 0; sweep < cap && !converged; ++sweep) {
        converged = true;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            double* ci = cols.data() + i * m;
            for (std::size_t j = i + 1; j < n; ++j) {
                double* cj = cols.data() + j * m;
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    alpha += ci[r] * ci[r];
                    beta += cj[r] * cj[r];
                    gamma += ci[r] * cj[r];
                }
                if (alpha <= tiny || beta <= tiny) continue;
                if (std::abs(gamma) <= opts.tolerance * std::sqrt(alpha * beta)) continue;
                converged = false;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double xi = ci[r], xj = cj[r];
                    ci[r] = c * xi - s * xj;
                    cj[r] = s * xi + c * xj;
                }
                double* vi = vcols.data() + i * n;
                double* vj = vcols.data() + j * n;
                for (std::size_t r = 0; r < n; ++r) {
                    const double xi = vi[r], xj = vj[r];
                    vi[r] = c * xi - s * xj;
                    vj[r] = s * xi + c * xj;
                }
            }
        }
    }
    if (!converged) {
        throw NumericalError("svd: Jacobi iteration did not converge within " + std::to_string(cap) +
                             " sweeps for a " + std::to_string(m) + "x" + std::to_string(n) + " matrix");
    }
    return vcols;
}

// Replace column `col` of the m×k matrix u by a unit vector orthogonal to all
// columns flagged as already valid.
inline void complete_basis_column(DenseTensor& u, std::size_t col, const std::vector<bool>& valid) {
    const std::size_t m = u.extent(0), k = u.extent(1);
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t p = 0; p < m; ++p) {
        std::vector<double> v(m, 0.0);
        v[p] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t q = 0; q < k; ++q) {
                if (!valid[q]) continue;
                double d = 0.0;
                for (std::size_t r = 0; r < m; ++r) d += u(r, q) * v[r];
                for (std::size_t r = 0; r < m; ++r) v[r] -= d * u(r, q);
            }
        }
        double nv = 0.0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv);
        if (nv > best_norm + 1e-12) {
            best_norm = nv;
            best = std::move(v);
        }
    }
    for (std::size_t r = 0; r < m; ++r) u(r, col) = best[r] / best_norm;
}

inline SvdResult svd_tall(const DenseTensor& a, const SvdOptions& opts) {
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<double> cols(n * m);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) cols[c * m + r] = a(r, c);

    const std::vector<double> vcols = jacobi_orthogonalize(cols, m, n, opts);

    std::vector<double> sigma(n);
    for (std::size_t c = 0; c < n; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) s += cols[c * m + r] * cols[c * m + r];
        sigma[c] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult out{DenseTensor::matrix(m, n), std::vector<double>(n), DenseTensor::matrix(n, n)};
    const double smax = n ? sigma[order[0]] : 0.0;
    const double zero_cut = smax * static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon();
    std::vector<bool> valid(n, false);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t c = order[k];
        out.s[k] = sigma[c];
        for (std::size_t r = 0; r < n; ++r) out.vt(k, r) = vcols[c * n + r];
        if (sigma[c] > zero_cut && sigma[c] > 0.0) {
            for (std::size_t r = 0; r < m; ++r) out.u(r, k) = cols[c * m + r] / sigma[c];
            valid[k] = true;
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        if (!valid[k]) {
            complete_basis_column(out.u, k, valid);
            valid[k] = true;
        }
    }
    return out;
}

inline void apply_sign_convention(SvdResult& r) {
    const std::size_t m = r.u.extent(0), k = r.u.extent(1), n = r.vt.extent(1);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double v = std::abs(r.u(i, c));
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        if (r.u(arg, c) < 0.0) {
            for (std::size_t i = 0; i < m; ++i) r.u(i, c) = -r.u(i, c);
            for (std::size_t j = 0; j < n; ++j) r.vt(c, j) = -r.vt(c, j);
        }
    }
}

} // namespace detail

/// Full thin SVD (k = min(m, n)) by one-sided Jacobi rotations.
inline SvdResult svd(const DenseTensor& a, const SvdOptions& opts = {}) {
    detail::require_matrix(a, "svd");
    for (double v : a.values()) {
        if (!std::isfinite(v)) {
            throw NumericalError("svd: non-finite entry in " + std::to_string(a.extent(0)) + "x" +
                                 std::to_string(a.extent(1)) + " matrix");
        }
    }
    SvdResult out;
    if (a.extent(0) >= a.extent(1)) {
        out = detail::svd_tall(a, opts);
    } else {
        SvdResult t = detail::svd_tall(transpose(a), opts);
        out.u = transpose(t.vt);
        out.s = std::move(t.s);
        out.vt = transpose(t.u);
    }
    detail::apply_sign_convention(out);
    return out;
}

/// Keeps the leading min(r, min(m,n)) singular triplets; the rank is clamped, never padded.
inline SvdResult truncated_svd(const DenseTensor& a, std::size_t r, const SvdOptions& opts = {}) {
    if (r < 1) throw ShapeError("truncated_svd: target rank must be >= 1");
    SvdResult full = svd(a, opts);
    const std::size_t k = std::min(r, full.rank());
    if (k == full.rank()) return full;

    const std::size_t m = full.u.extent(0), n = full.vt.extent(1);
    SvdResult out{DenseTensor::matrix(m, k), std::vector<double>(full.s.begin(), full.s.begin() + k),
                  DenseTensor::matrix(k, n)};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < k; ++c) out.u(i, c) = full.u(i, c);
    std::copy_n(full.vt.data(), k * n, out.vt.data());
    return out;
}

/// u · diag(s) · vt
inline DenseTensor reconstruct(const SvdResult& r) {
    DenseTensor us = r.u;
    const std::size_t m = us.extent(0), k = us.extent(1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < k; ++c) us(i, c) *= r.s[c];
    return matmul(us, r.vt);
}

} // namespace ttadapt
