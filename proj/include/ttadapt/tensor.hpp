#pragma once

#include "ttadapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace ttadapt {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

inline std::size_t shape_product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. Rank-2 tensors double as matrices.
class DenseTensor {
public:
    DenseTensor() : data_(1, 0.0) {}

    explicit DenseTensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_extents(shape_);
        data_.assign(shape_product(shape_), fill);
    }

    DenseTensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents(shape_);
        if (data_.size() != shape_product(shape_)) {
            throw ShapeError("DenseTensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_to_string(shape_));
        }
    }

    static DenseTensor zeros(Shape shape) { return DenseTensor(std::move(shape)); }

    static DenseTensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return DenseTensor({rows, cols}, fill);
    }

    static DenseTensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("DenseTensor::matrix: ragged initializer");
            data.insert(data.end(), row.begin(), row.end());
        }
        return DenseTensor({r, c}, std::move(data));
    }

    static DenseTensor identity(std::size_t n) {
        DenseTensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

    [[nodiscard]] std::size_t rows() const {
        require_matrix("rows");
        return shape_[0];
    }
    [[nodiscard]] std::size_t cols() const {
        require_matrix("cols");
        return shape_[1];
    }

    [[nodiscard]] std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Flat offset of a full multi-index.
    [[nodiscard]] std::size_t offset(std::span<const std::size_t> index) const {
        if (index.size() != shape_.size()) throw ShapeError("DenseTensor::offset: index rank mismatch");
        std::size_t off = 0;
        for (std::size_t a = 0; a < index.size(); ++a) {
            if (index[a] >= shape_[a]) {
                throw ShapeError("DenseTensor::offset: index " + std::to_string(index[a]) + " out of range on axis " +
                                 std::to_string(a));
            }
            off = off * shape_[a] + index[a];
        }
        return off;
    }

    /// Row-major reinterpretation; throws if the element count differs.
    [[nodiscard]] DenseTensor reshaped(Shape new_shape) const& {
        DenseTensor out = *this;
        out.reshape_in_place(std::move(new_shape));
        return out;
    }
    [[nodiscard]] DenseTensor reshaped(Shape new_shape) && {
        reshape_in_place(std::move(new_shape));
        return std::move(*this);
    }

    void reshape_in_place(Shape new_shape) {
        check_extents(new_shape);
        if (shape_product(new_shape) != data_.size()) {
            throw ShapeError("reshape: cannot reshape " + shape_to_string(shape_) + " into " +
                             shape_to_string(new_shape));
        }
        shape_ = std::move(new_shape);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const DenseTensor&) const = default;

private:
    static void check_extents(const Shape& shape) {
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("DenseTensor: zero extent in shape " + shape_to_string(shape));
        }
    }

    void require_matrix(const char* what) const {
        if (shape_.size() != 2) {
            throw ShapeError(std::string(what) + ": expected a matrix, got shape " + shape_to_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline DenseTensor reshape(const DenseTensor& t, Shape new_shape) { return t.reshaped(std::move(new_shape)); }

namespace detail {
inline void require_matrix(const DenseTensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
}
} // namespace detail

/// out += a·b with a fixed i-k-j summation order.
inline void matmul_accumulate(const DenseTensor& a, const DenseTensor& b, DenseTensor& out) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    if (out.rank() != 2 || out.extent(0) != m || out.extent(1) != n) {
        throw ShapeError("matmul: output shape " + shape_to_string(out.shape()) + " does not match (" +
                         std::to_string(m) + "," + std::to_string(n) + ")");
    }
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        const double* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    DenseTensor out = DenseTensor::matrix(a.extent(0), b.extent(1));
    matmul_accumulate(a, b, out);
    return out;
}

inline DenseTensor transpose(const DenseTensor& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t m = a.extent(0), n = a.extent(1);
    DenseTensor out = DenseTensor::matrix(n, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

/// aᵀ·b
inline DenseTensor matmul_tn(const DenseTensor& a, const DenseTensor& b) { return matmul(transpose(a), b); }

/// a·bᵀ
inline DenseTensor matmul_nt(const DenseTensor& a, const DenseTensor& b) { return matmul(a, transpose(b)); }

inline double frobenius_norm(const DenseTensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: shapes differ, " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// ‖a − b‖_F
inline double frobenius_distance(const DenseTensor& a, const DenseTensor& b) {
    if (a.size() != b.size()) throw ShapeError("frobenius_distance: element counts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline void add_in_place(DenseTensor& acc, const DenseTensor& x, double scale = 1.0) {
    if (acc.size() != x.size()) throw ShapeError("add_in_place: element counts differ");
    double* pa = acc.data();
    const double* px = x.data();
    for (std::size_t i = 0; i < acc.size(); ++i) pa[i] += scale * px[i];
}

inline void scale_in_place(DenseTensor& t, double s) {
    for (double& v : t.values()) v *= s;
}

} // namespace ttadapt
