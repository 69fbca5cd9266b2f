#include "linalg/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "util/error.hpp"

namespace comcat::linalg {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

void Matrix::resize(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  data_.resize(rows * cols);
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t.data_[j * rows_ + i] = data_[i * cols_ + j];
  return t;
}

Matrix Matrix::col_block(std::size_t begin, std::size_t count) const {
  if (begin + count > cols_) throw ShapeError("column block out of range for " + shape_string());
  Matrix out(rows_, count);
  for (std::size_t i = 0; i < rows_; ++i)
    std::copy_n(data_.begin() + i * cols_ + begin, count, out.data_.begin() + i * count);
  return out;
}

Matrix Matrix::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) throw ShapeError("row block out of range for " + shape_string());
  Matrix out(count, cols_);
  std::copy_n(data_.begin() + begin * cols_, count * cols_, out.data_.begin());
  return out;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

std::uint64_t& mac_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

namespace {

void check_inner(const char* op, std::size_t a_inner, std::size_t b_inner, const Matrix& a,
                 const Matrix& b) {
  if (a_inner != b_inner)
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                     b.shape_string());
}

// out(i, :) += sum_k a(i, k) * b(k, :), k ascending. b is inner x n row-major.
void gemm_rows(double* __restrict out, const double* __restrict a, const double* __restrict b,
               std::size_t m, std::size_t inner, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict c = out + i * n;
    const double* ai = a + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = ai[k];
      const double* __restrict bk = b + k * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += aik * bk[j];
    }
  }
}

}  // namespace

void matmul_into(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul", a.cols(), b.rows(), a, b);
  out.resize(a.rows(), b.cols());
  out.fill(0.0);
  matmul_acc(out, a, b);
}

void matmul_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul", a.cols(), b.rows(), a, b);
  if (out.rows() != a.rows() || out.cols() != b.cols())
    throw ShapeError("matmul: accumulator is " + out.shape_string());
  mac_counter() += a.rows() * a.cols() * b.cols();
  gemm_rows(out.data().data(), a.data().data(), b.data().data(), a.rows(), a.cols(), b.cols());
}

void matmul_nt_into(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul_nt", a.cols(), b.cols(), a, b);
  const Matrix bt = b.transpose();
  matmul_into(out, a, bt);
}

void matmul_nt_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul_nt", a.cols(), b.cols(), a, b);
  const Matrix bt = b.transpose();
  matmul_acc(out, a, bt);
}

void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul_tn", a.rows(), b.rows(), a, b);
  out.resize(a.cols(), b.cols());
  out.fill(0.0);
  matmul_tn_acc(out, a, b);
}

void matmul_tn_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  check_inner("matmul_tn", a.rows(), b.rows(), a, b);
  if (out.rows() != a.cols() || out.cols() != b.cols())
    throw ShapeError("matmul_tn: accumulator is " + out.shape_string());
  const std::size_t inner = a.rows(), m = a.cols(), n = b.cols();
  mac_counter() += inner * m * n;
  double* o = out.data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t k = 0; k < inner; ++k) {
    const double* __restrict bk = pb + k * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aki = pa[k * m + i];
      double* __restrict c = o + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += aki * bk[j];
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out;
  matmul_into(out, a, b);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  Matrix out;
  matmul_nt_into(out, a, b);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix out;
  matmul_tn_into(out, a, b);
  return out;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += pb[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  auto o = out.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= pb[i];
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Matrix add_row(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: bias " + row.shape_string() + " for " + a.shape_string());
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row(0, j);
  }
  return out;
}

Matrix hstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("hstack: row count mismatch " + p.shape_string());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.row(i).begin(), p.row(i).end(), out.row(i).begin() + offset);
    offset += p.cols();
  }
  return out;
}

Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column count mismatch " + p.shape_string());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  auto dst = out.data().begin();
  for (const auto& p : parts) dst = std::copy(p.data().begin(), p.data().end(), dst);
  return out;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace comcat::linalg
