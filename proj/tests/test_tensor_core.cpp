#include "ttadapt/rng.hpp"
#include "ttadapt/svd.hpp"
#include "ttadapt/tensor.hpp"

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace ttadapt;

namespace {

DenseTensor naive_matmul(const DenseTensor& a, const DenseTensor& b) {
    DenseTensor c = DenseTensor::matrix(a.extent(0), b.extent(1));
    for (std::size_t i = 0; i < a.extent(0); ++i)
        for (std::size_t j = 0; j < b.extent(1); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.extent(1); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

double orthonormality_error(const DenseTensor& q) {
    double worst = 0.0;
    for (std::size_t i = 0; i < q.extent(1); ++i)
        for (std::size_t j = 0; j < q.extent(1); ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < q.extent(0); ++r) s += q(r, i) * q(r, j);
            worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

DenseTensor rows_of(const DenseTensor& vt) { return transpose(vt); }

} // namespace

TEST(DenseTensor, ConstructionAndIndexing) {
    DenseTensor t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    t(1, 2, 3) = 5.0;
    EXPECT_EQ(t[23], 5.0);
    const std::vector<std::size_t> idx{1, 2, 3};
    EXPECT_EQ(t.offset(idx), 23u);
    EXPECT_THROW(DenseTensor({2, 0}), ShapeError);
    EXPECT_THROW(DenseTensor({2, 2}, std::vector<double>(3)), ShapeError);
    const std::vector<std::size_t> bad{2, 0, 0};
    EXPECT_THROW((void)t.offset(bad), ShapeError);
}

TEST(DenseTensor, ReshapeKeepsRowMajorOrder) {
    DenseTensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
    const DenseTensor r = t.reshaped({3, 2});
    EXPECT_EQ(r(2, 1), 5.0);
    EXPECT_EQ(r(1, 0), 2.0);
    EXPECT_THROW((void)t.reshaped({4, 2}), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(1, 9);
        const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
        const DenseTensor a = random_normal({m, k}, rng), b = random_normal({k, n}, rng);
        EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-13);
        EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)), 1e-13);
        EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)), 1e-13);
    }
}

TEST(Matmul, RejectsMismatchedInnerDimension) {
    EXPECT_THROW((void)matmul(DenseTensor::matrix(2, 3), DenseTensor::matrix(4, 2)), ShapeError);
    EXPECT_THROW((void)matmul(DenseTensor({2, 2, 2}), DenseTensor::matrix(2, 2)), ShapeError);
}

TEST(Matmul, PropagatesNonFiniteValues) {
    DenseTensor a = DenseTensor::matrix({{0.0, 1.0}});
    DenseTensor b = DenseTensor::matrix({{std::numeric_limits<double>::infinity()}, {1.0}});
    EXPECT_TRUE(std::isnan(matmul(a, b)(0, 0)));
}

TEST(Svd, ReconstructsAndIsOrthonormal) {
    Rng rng(11);
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{6, 4}, {4, 6}, {5, 5}, {1, 7}, {7, 1}}) {
        const DenseTensor a = random_normal({m, n}, rng);
        const SvdResult r = svd(a);
        ASSERT_EQ(r.rank(), std::min(m, n));
        EXPECT_LT(max_abs_diff(reconstruct(r), a), 1e-12);
        EXPECT_LT(orthonormality_error(r.u), 1e-12);
        EXPECT_LT(orthonormality_error(rows_of(r.vt)), 1e-12);
        for (std::size_t i = 1; i < r.s.size(); ++i) EXPECT_GE(r.s[i - 1], r.s[i]);
    }
}

TEST(Svd, DiagonalExample) {
    const SvdResult r = svd(DenseTensor::matrix({{3, 0}, {0, 4}}));
    ASSERT_EQ(r.s.size(), 2u);
    EXPECT_NEAR(r.s[0], 4.0, 1e-14);
    EXPECT_NEAR(r.s[1], 3.0, 1e-14);
}

TEST(Svd, SignConventionMakesLargestUEntryNonNegative) {
    Rng rng(5);
    const SvdResult r = svd(random_normal({6, 3}, rng));
    for (std::size_t j = 0; j < r.u.extent(1); ++j) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < r.u.extent(0); ++i)
            if (std::abs(r.u(i, j)) > std::abs(r.u(arg, j))) arg = i;
        EXPECT_GE(r.u(arg, j), 0.0);
    }
}

TEST(Svd, RankDeficientInputKeepsOrthonormalFactors) {
    Rng rng(8);
    const DenseTensor x = random_normal({6, 2}, rng), y = random_normal({2, 5}, rng);
    const DenseTensor a = matmul(x, y);
    const SvdResult r = svd(a);
    EXPECT_LT(r.s[2], 1e-12);
    EXPECT_LT(orthonormality_error(r.u), 1e-10);
    EXPECT_LT(max_abs_diff(reconstruct(r), a), 1e-12);
}

TEST(Svd, ZeroMatrix) {
    const SvdResult r = svd(DenseTensor::matrix(3, 2));
    for (double s : r.s) EXPECT_EQ(s, 0.0);
    EXPECT_LT(orthonormality_error(r.u), 1e-12);
}

TEST(Svd, RejectsNonFiniteInput) {
    DenseTensor a = DenseTensor::matrix(2, 2);
    a(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW((void)svd(a), NumericalError);
}

TEST(TruncatedSvd, ErrorEqualsTailSingularValues) {
    Rng rng(21);
    const DenseTensor a = random_normal({7, 5}, rng);
    const SvdResult full = svd(a);
    for (std::size_t r = 1; r <= 5; ++r) {
        double tail = 0.0;
        for (std::size_t k = r; k < full.s.size(); ++k) tail += full.s[k] * full.s[k];
        EXPECT_NEAR(frobenius_distance(reconstruct(truncated_svd(a, r)), a), std::sqrt(tail), 1e-12);
    }
}

TEST(TruncatedSvd, ClampsRankAboveMinimumDimension) {
    Rng rng(2);
    const DenseTensor a = random_normal({3, 4}, rng);
    const SvdResult r = truncated_svd(a, 10);
    EXPECT_EQ(r.rank(), 3u);
    EXPECT_LT(max_abs_diff(reconstruct(r), a), 1e-12);
    EXPECT_THROW((void)truncated_svd(a, 0), ShapeError);
}

TEST(Svd, SingularValuesMatchEigenOracle) {
    Rng rng(99);
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{8, 5}, {5, 8}, {12, 12}}) {
        const DenseTensor a = random_normal({m, n}, rng);
        Eigen::MatrixXd e(m, n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) e(i, j) = a(i, j);
        const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
        const SvdResult r = svd(a);
        for (std::size_t i = 0; i < r.s.size(); ++i) EXPECT_NEAR(r.s[i], ref(static_cast<Eigen::Index>(i)), 1e-12);
    }
}
