#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "linalg/matrix.hpp"

namespace comcat::linalg {

// Thin SVD m = u * diag(sigma) * vt with k = min(rows, cols).
//
// sigma is non-increasing (ties keep original column order) and each column of
// u has its largest-magnitude entry non-negative.
struct SvdResult {
  Matrix u;                   // rows x k, orthonormal columns
  std::vector<double> sigma;  // k values
  Matrix vt;                  // k x cols, orthonormal rows

  Matrix reconstruct() const;
};

// Rank-r factorization w ~= u * s, with the singular values folded into s.
struct FactorPair {
  Matrix u;  // in x r, orthonormal columns
  Matrix s;  // r x out

  std::size_t rank() const { return u.cols(); }
  std::size_t in_dim() const { return u.rows(); }
  std::size_t out_dim() const { return s.cols(); }
  std::size_t parameter_count() const { return u.size() + s.size(); }
  Matrix product() const { return matmul(u, s); }
  // Leading r components (nested truncation).
  FactorPair leading(std::size_t r) const;
};

inline constexpr int kSvdMaxSweeps = 60;

// One-sided Jacobi SVD. Throws NumericalError if the sweep cap is hit.
SvdResult svd(const Matrix& m);

FactorPair truncated_factor(const Matrix& w, std::size_t r);
FactorPair truncated_factor(const SvdResult& decomposition, std::size_t r);

// sqrt(sum_{i >= r} sigma_i^2): Frobenius residual of the best rank-r approximation.
double tail_energy(std::span<const double> sigma, std::size_t r);

// Prefix sums of sigma normalized by the total; the last entry is exactly 1.
std::vector<double> cumulative_spectrum(std::span<const double> sigma);

// Smallest r (1-based) whose cumulative ratio reaches tau.
std::size_t rank_at_threshold(std::span<const double> sigma, double tau);

// Number of singular values >= tol * sigma_max (0 for the zero matrix).
std::size_t numerical_rank(const Matrix& m, double tol);

}  // namespace comcat::linalg
