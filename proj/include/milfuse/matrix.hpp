#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace milfuse {

/// Dense row-major matrix of 64-bit reals. The only tensor type in the
/// library; vectors are plain std::vector<double>.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* row_ptr(std::size_t i) { return data_.data() + i * cols_; }
  const double* row_ptr(std::size_t i) const { return data_.data() + i * cols_; }
  std::span<double> row(std::size_t i) { return {row_ptr(i), cols_}; }
  std::span<const double> row(std::size_t i) const { return {row_ptr(i), cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const;
  std::string shape_str() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. All check operand shapes and throw ShapeError naming both shapes.
Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transpose(const Matrix& a);

void add_inplace(Matrix& a, const Matrix& b);          // a += b
void axpy_inplace(Matrix& a, double s, const Matrix& b);  // a += s*b
void scale_inplace(Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Numerically stable sigmoid, branch-wise so exp never overflows.
double sigmoid(double x);

/// Max-shifted softmax. Entries positive, sum 1. Throws ContractError on
/// empty input, NumericError on non-finite entries.
std::vector<double> softmax(std::span<const double> v);

/// In-place row-wise softmax of a matrix (each row normalized independently).
void softmax_rows_inplace(Matrix& m);

}  // namespace milfuse
