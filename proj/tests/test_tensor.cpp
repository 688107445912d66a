#include <gtest/gtest.h>

#include <random>

#include "mde/tensor.hpp"

using mde::Matrix;
using mde::Tensor4;

namespace {

Tensor4 iota_tensor(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  Tensor4 t(b, c, h, w);
  for (std::size_t i = 0; i < t.data().size(); ++i) t.data()[i] = static_cast<double>(i) * 0.5 - 3.0;
  return t;
}

}  // namespace

TEST(Tensor4, LayoutIsBatchMajorWidthMinor) {
  Tensor4 t = iota_tensor(2, 3, 4, 5);
  EXPECT_EQ(t.data().size(), 120u);
  EXPECT_EQ(t(1, 2, 3, 4), t.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4]);
  EXPECT_EQ(t.plane(1, 2).data(), t.data().data() + (1 * 3 + 2) * 20);
}

TEST(ReshapeChannels, TwoByTwo) {
  Tensor4 t(1, 2, 1, 2);
  t.data() = {1.0, 2.0, 3.0, 4.0};
  const Matrix m = mde::reshape_channels(t, 0);
  ASSERT_EQ(m.rows(), 2u);
  ASSERT_EQ(m.cols(), 2u);
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 2.0);
  EXPECT_EQ(m(1, 0), 3.0);
  EXPECT_EQ(m(1, 1), 4.0);
}

TEST(ReshapeChannels, SingleElement) {
  Tensor4 t(1, 1, 1, 1);
  t.data() = {5.0};
  const Matrix m = mde::reshape_channels(t, 0);
  EXPECT_EQ(m.rows(), 1u);
  EXPECT_EQ(m(0, 0), 5.0);
}

TEST(ReshapeChannels, MatchesHandIndexing) {
  const Tensor4 t = iota_tensor(2, 3, 4, 4);
  const Matrix m = mde::reshape_channels(t, 1);
  ASSERT_EQ(m.rows(), 3u);
  ASSERT_EQ(m.cols(), 16u);
  std::size_t checked = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t w = 0; w < 4; ++w, ++checked) EXPECT_EQ(m(c, h * 4 + w), t(1, c, h, w));
  EXPECT_EQ(checked, 48u);
}

TEST(ReshapeChannels, OutOfRangeThrows) {
  const Tensor4 t = iota_tensor(2, 1, 2, 2);
  EXPECT_THROW(mde::reshape_channels(t, 2), std::out_of_range);
}

TEST(ReshapeChannels, InverseRecoversTensor) {
  const Tensor4 t = iota_tensor(3, 2, 3, 5);
  Tensor4 back(3, 2, 3, 5);
  for (std::size_t b = 0; b < 3; ++b) mde::write_channels(back, b, mde::reshape_channels(t, b));
  EXPECT_EQ(back, t);
}

TEST(Tensor4, GatherSamples) {
  const Tensor4 t = iota_tensor(4, 2, 2, 2);
  const std::size_t idx[] = {3, 0};
  const Tensor4 g = mde::gather_samples(t, idx);
  EXPECT_EQ(g.batch(), 2u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(g.sample(0)[i], t.sample(3)[i]);
    EXPECT_EQ(g.sample(1)[i], t.sample(0)[i]);
  }
}

TEST(Tensor4, FiniteCheck) {
  Tensor4 t = iota_tensor(1, 1, 2, 2);
  EXPECT_TRUE(t.all_finite());
  t.data()[2] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Matrix, MatmulAgainstLoops) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  Matrix a(3, 4), b(4, 2);
  for (double& v : a.data()) v = n01(rng);
  for (double& v : b.data()) v = n01(rng);
  const Matrix c = mde::matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-14);
    }
  EXPECT_THROW(mde::matmul(a, a), std::invalid_argument);
}

TEST(Matrix, TransposeAndNorms) {
  Matrix a(2, 3);
  a.data() = {1, 2, 3, 4, 5, 6};
  const Matrix t = a.transposed();
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t(2, 1), 6.0);
  EXPECT_DOUBLE_EQ(mde::frobenius_norm(a), std::sqrt(91.0));
  EXPECT_DOUBLE_EQ(mde::frobenius_distance(a, a), 0.0);
}
