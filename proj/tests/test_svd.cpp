#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "common.hpp"
#include "mde/svd.hpp"

using mde::Matrix;
using mde::testing::random_matrix;

namespace {

double sum_sq_tail(const std::vector<double>& s, std::size_t k) {
  double t = 0.0;
  for (std::size_t i = k; i < s.size(); ++i) t += s[i] * s[i];
  return std::sqrt(t);
}

Matrix product(const mde::SvdResult& f) { return mde::reconstruct(f, f.singular_values.size()); }

}  // namespace

TEST(Svd, Diagonal) {
  Matrix m(2, 2);
  m.data() = {3.0, 0.0, 0.0, 1.0};
  const auto f = mde::svd(m);
  ASSERT_EQ(f.singular_values.size(), 2u);
  EXPECT_NEAR(f.singular_values[0], 3.0, 1e-12);
  EXPECT_NEAR(f.singular_values[1], 1.0, 1e-12);
}

TEST(Svd, SortsDiagonalDescending) {
  Matrix m(3, 3);
  m.data() = {1.0, 0, 0, 0, 5.0, 0, 0, 0, 2.0};
  const auto f = mde::svd(m);
  EXPECT_NEAR(f.singular_values[0], 5.0, 1e-12);
  EXPECT_NEAR(f.singular_values[1], 2.0, 1e-12);
  EXPECT_NEAR(f.singular_values[2], 1.0, 1e-12);
  EXPECT_LE(mde::frobenius_distance(product(f), m), 1e-12);
}

TEST(Svd, RankOneFromKnownFactors) {
  // u has norm 2, v has norm 1
  const std::vector<double> u{1.2, 1.6}, v{0.6, 0.0, 0.8};
  Matrix m(2, 3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) m(i, j) = u[i] * v[j];
  const auto f = mde::svd(m);
  EXPECT_NEAR(f.singular_values[0], 2.0, 1e-12);
  EXPECT_LE(f.singular_values[1], 1e-10);
  EXPECT_LE(mde::testing::column_orthonormality_error(f.u), 1e-8);
  EXPECT_LE(mde::testing::row_orthonormality_error(f.vt), 1e-8);
}

TEST(Svd, Random5x7ReconstructsAndSorts) {
  std::mt19937_64 rng(57);
  const Matrix m = random_matrix(5, 7, rng);
  const auto f = mde::svd(m);
  EXPECT_EQ(f.u.rows(), 5u);
  EXPECT_EQ(f.u.cols(), 5u);
  EXPECT_EQ(f.vt.rows(), 5u);
  EXPECT_EQ(f.vt.cols(), 7u);
  EXPECT_LE(mde::frobenius_distance(product(f), m) / mde::frobenius_norm(m), 1e-8);
  for (std::size_t i = 0; i + 1 < f.singular_values.size(); ++i)
    EXPECT_GE(f.singular_values[i], f.singular_values[i + 1]);
}

TEST(Svd, SingularValuesSquaredSumToFrobenius) {
  std::mt19937_64 rng(8);
  const Matrix m = random_matrix(6, 4, rng);
  const auto f = mde::svd(m);
  const double s2 = std::accumulate(f.singular_values.begin(), f.singular_values.end(), 0.0,
                                    [](double a, double s) { return a + s * s; });
  EXPECT_NEAR(s2, std::pow(mde::frobenius_norm(m), 2), 1e-10);
}

TEST(Svd, VectorShapes) {
  Matrix row(1, 4), col(4, 1);
  row.data() = {3.0, 0.0, 4.0, 0.0};
  col.data() = row.data();
  EXPECT_NEAR(mde::svd(row).singular_values[0], 5.0, 1e-12);
  EXPECT_NEAR(mde::svd(col).singular_values[0], 5.0, 1e-12);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
  const Matrix m(3, 5);
  const auto f = mde::svd(m);
  for (double s : f.singular_values) EXPECT_EQ(s, 0.0);
  EXPECT_LE(mde::testing::column_orthonormality_error(f.u), 1e-8);
  EXPECT_LE(mde::testing::row_orthonormality_error(f.vt), 1e-8);
}

TEST(Svd, RejectsNonFiniteAndEmpty) {
  Matrix m(2, 2);
  m(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(mde::svd(m), std::invalid_argument);
  EXPECT_THROW(mde::svd(Matrix(0, 3)), std::invalid_argument);
}

TEST(TruncateReconstruct, FullRatioIsIdentity) {
  std::mt19937_64 rng(1);
  const Matrix m = random_matrix(4, 9, rng);
  EXPECT_LE(mde::frobenius_distance(mde::truncate_reconstruct(m, 1.0), m), 1e-8);
}

TEST(TruncateReconstruct, IdentityHalf) {
  const Matrix i2 = Matrix::identity(2);
  const Matrix r = mde::truncate_reconstruct(i2, 0.5);
  EXPECT_NEAR(mde::frobenius_distance(r, i2), 1.0, 1e-12);
  const auto f = mde::svd(r);
  EXPECT_LE(f.singular_values[1], 1e-12);
}

TEST(TruncateReconstruct, EckartYoungRandom4x6) {
  std::mt19937_64 rng(46);
  const Matrix m = random_matrix(4, 6, rng);
  const auto f = mde::svd(m);
  const std::size_t k = mde::truncation_rank(0.5, 4);
  EXPECT_EQ(k, 2u);
  EXPECT_NEAR(mde::frobenius_distance(mde::truncate_reconstruct(m, 0.5), m), sum_sq_tail(f.singular_values, k), 1e-8);
}

TEST(TruncateReconstruct, EckartYoungEveryRank) {
  std::mt19937_64 rng(99);
  const Matrix m = random_matrix(5, 8, rng);
  const auto f = mde::svd(m);
  for (std::size_t k = 1; k <= 5; ++k)
    EXPECT_NEAR(mde::frobenius_distance(mde::reconstruct(f, k), m), sum_sq_tail(f.singular_values, k), 1e-8) << k;
}

TEST(TruncateReconstruct, Idempotent) {
  std::mt19937_64 rng(5);
  const Matrix m = random_matrix(6, 10, rng);
  const Matrix once = mde::truncate_reconstruct(m, 0.5);
  EXPECT_LE(mde::frobenius_distance(mde::truncate_reconstruct(once, 0.5), once), 1e-8);
}

TEST(TruncationRank, CeilAndBounds) {
  EXPECT_EQ(mde::truncation_rank(0.5, 3), 2u);
  EXPECT_EQ(mde::truncation_rank(0.01, 3), 1u);
  EXPECT_EQ(mde::truncation_rank(1.0, 7), 7u);
  EXPECT_EQ(mde::truncation_rank(0.5, 8), 4u);
  EXPECT_THROW(mde::truncation_rank(0.0, 3), std::invalid_argument);
  EXPECT_THROW(mde::truncation_rank(1.5, 3), std::invalid_argument);
}

TEST(Svd, PropertySweep) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  for (int trial = 0; trial < 40; ++trial) {
    const Matrix m = random_matrix(dim(rng), dim(rng), rng);
    const auto f = mde::svd(m);
    EXPECT_LE(mde::testing::column_orthonormality_error(f.u), 1e-8);
    EXPECT_LE(mde::testing::row_orthonormality_error(f.vt), 1e-8);
    EXPECT_LE(mde::frobenius_distance(product(f), m), 1e-8 * std::max(1.0, mde::frobenius_norm(m)));
  }
}
