#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmerl/errors.hpp"

namespace dmerl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::size_t rows() const {
    require_matrix();
    return shape_[0];
  }
  [[nodiscard]] std::size_t cols() const {
    require_matrix();
    return shape_[1];
  }

  [[nodiscard]] std::span<double> data() & noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const& noexcept { return data_; }
  std::span<const double> data() && = delete;
  [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  /// Eigen view of a rank-2 tensor (rank-1 tensors are viewed as one row).
  [[nodiscard]] MatrixMap mat() {
    const auto [r, c] = as_matrix_extents();
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  [[nodiscard]] ConstMatrixMap mat() const {
    const auto [r, c] = as_matrix_extents();
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void require_matrix() const {
    if (shape_.size() != 2) throw DimensionError("expected a rank-2 tensor, got shape " + shape_string(shape_));
  }

  [[nodiscard]] std::pair<std::size_t, std::size_t> as_matrix_extents() const {
    if (shape_.size() == 2) return {shape_[0], shape_[1]};
    if (shape_.size() == 1) return {1, shape_[0]};
    throw DimensionError("cannot view shape " + shape_string(shape_) + " as a matrix");
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Horizontal concatenation of row-aligned matrices.
inline Tensor concat_cols(std::initializer_list<const Tensor*> parts) {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool first = true;
  for (const Tensor* p : parts) {
    if (first) {
      rows = p->rows();
      first = false;
    } else if (p->rows() != rows) {
      throw DimensionError("concat_cols: row count mismatch " + std::to_string(p->rows()) + " vs " +
                           std::to_string(rows));
    }
    cols += p->cols();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    const std::size_t c = p->cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) out(r, offset + j) = (*p)(r, j);
    offset += c;
  }
  return out;
}

/// Columns [begin, begin + count) of a matrix.
inline Tensor slice_cols(const Tensor& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw DimensionError("slice_cols: range exceeds column count");
  Tensor out = Tensor::matrix(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t j = 0; j < count; ++j) out(r, j) = m(r, begin + j);
  return out;
}

}  // namespace dmerl
