#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace comcat::linalg {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  // Reshapes without preserving contents when the element count changes.
  void resize(std::size_t rows, std::size_t cols);
  void fill(double v);

  Matrix transpose() const;
  // Columns [begin, begin + count).
  Matrix col_block(std::size_t begin, std::size_t count) const;
  // Rows [begin, begin + count).
  Matrix row_block(std::size_t begin, std::size_t count) const;

  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Multiply-accumulate counter for the calling thread. Every product kernel
// below adds rows*inner*cols to it; cost accounting tests read it back.
std::uint64_t& mac_counter();

// c = a * b. Each entry accumulates over the inner index in ascending order,
// starting from 0.0.
Matrix matmul(const Matrix& a, const Matrix& b);
// c = a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// c = a^T * b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// In-place variants writing into an existing matrix (resized as needed).
void matmul_into(Matrix& out, const Matrix& a, const Matrix& b);
void matmul_nt_into(Matrix& out, const Matrix& a, const Matrix& b);
void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b);
// out += a^T * b and out += a * b^T, used by backward passes.
void matmul_tn_acc(Matrix& out, const Matrix& a, const Matrix& b);
void matmul_nt_acc(Matrix& out, const Matrix& a, const Matrix& b);
void matmul_acc(Matrix& out, const Matrix& a, const Matrix& b);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
// Adds a 1 x cols row to every row.
Matrix add_row(const Matrix& a, const Matrix& row);
Matrix hstack(std::span<const Matrix> parts);
Matrix vstack(std::span<const Matrix> parts);

double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Throws ShapeError unless a and b have identical shapes.
void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

}  // namespace comcat::linalg
