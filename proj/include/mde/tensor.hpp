#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mde {

// Dense 4-D array laid out [batch, channel, height, width], width innermost.
class Tensor4 {
 public:
  Tensor4() = default;

  Tensor4(std::size_t batch, std::size_t channels, std::size_t height,
          std::size_t width, double fill = 0.0)
      : batch_(batch), channels_(channels), height_(height), width_(width),
        data_(batch * channels * height * width, fill) {}

  Tensor4(std::size_t batch, std::size_t channels, std::size_t height,
          std::size_t width, std::vector<double> data)
      : batch_(batch), channels_(channels), height_(height), width_(width),
        data_(std::move(data)) {
    if (data_.size() != batch_ * channels_ * height_ * width_)
      throw std::invalid_argument("Tensor4: data length does not match shape");
  }

  std::size_t batch() const { return batch_; }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t spatial() const { return height_ * width_; }
  std::size_t sample_size() const { return channels_ * height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t b, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return ((b * channels_ + c) * height_ + h) * width_ + w;
  }

  double& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(b, c, h, w)];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return data_[index(b, c, h, w)];
  }

  // Contiguous H*W plane of one (sample, channel) pair.
  std::span<double> plane(std::size_t b, std::size_t c) {
    return {data_.data() + (b * channels_ + c) * spatial(), spatial()};
  }
  std::span<const double> plane(std::size_t b, std::size_t c) const {
    return {data_.data() + (b * channels_ + c) * spatial(), spatial()};
  }

  std::span<double> sample(std::size_t b) {
    return {data_.data() + b * sample_size(), sample_size()};
  }
  std::span<const double> sample(std::size_t b) const {
    return {data_.data() + b * sample_size(), sample_size()};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor4& o) const {
    return batch_ == o.batch_ && channels_ == o.channels_ &&
           height_ == o.height_ && width_ == o.width_;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    return "(" + std::to_string(batch_) + "," + std::to_string(channels_) + "," +
           std::to_string(height_) + "," + std::to_string(width_) + ")";
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  std::size_t batch_ = 0, channels_ = 0, height_ = 0, width_ = 0;
  std::vector<double> data_;
};

// Gathers the listed samples into a new tensor, in the given order.
inline Tensor4 gather_samples(const Tensor4& x, std::span<const std::size_t> indices) {
  Tensor4 out(indices.size(), x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.batch())
      throw std::out_of_range("gather_samples: sample index out of range");
    auto src = x.sample(indices[i]);
    std::copy(src.begin(), src.end(), out.sample(i).begin());
  }
  return out;
}

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw std::invalid_argument("Matrix: data length does not match shape");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("frobenius_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// C x (H*W) view of one sample; element (c, h*W + w) is x[sample, c, h, w].
inline Matrix reshape_channels(const Tensor4& x, std::size_t sample_index) {
  if (sample_index >= x.batch())
    throw std::out_of_range("reshape_channels: sample index " +
                            std::to_string(sample_index) + " out of range for batch " +
                            std::to_string(x.batch()));
  auto s = x.sample(sample_index);
  return Matrix(x.channels(), x.spatial(), std::vector<double>(s.begin(), s.end()));
}

// Inverse of reshape_channels: writes a C x (H*W) matrix back into one sample.
inline void write_channels(Tensor4& x, std::size_t sample_index, const Matrix& m) {
  if (sample_index >= x.batch())
    throw std::out_of_range("write_channels: sample index out of range");
  if (m.rows() != x.channels() || m.cols() != x.spatial())
    throw std::invalid_argument("write_channels: matrix shape does not match tensor");
  std::copy(m.data().begin(), m.data().end(), x.sample(sample_index).begin());
}

}  // namespace mde
