#include "linalg/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "util/error.hpp"

namespace comcat::linalg {

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void rotate(double* p, double* q, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xp = p[i];
    const double xq = q[i];
    p[i] = c * xp - s * xq;
    q[i] = s * xp + c * xq;
  }
}

// Completes an orthonormal set: fills columns `missing` of u (rows x k) with
// unit vectors orthogonal to every other column, drawn from the standard basis
// by modified Gram-Schmidt.
void complete_basis(Matrix& u, const std::vector<bool>& missing) {
  const std::size_t rows = u.rows(), k = u.cols();
  std::vector<std::size_t> accepted;
  for (std::size_t j = 0; j < k; ++j)
    if (!missing[j]) accepted.push_back(j);
  std::size_t candidate = 0;
  std::vector<double> v(rows);
  for (std::size_t j = 0; j < k; ++j) {
    if (!missing[j]) continue;
    for (; candidate < rows; ++candidate) {
      std::fill(v.begin(), v.end(), 0.0);
      v[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t a : accepted) {
          double proj = 0.0;
          for (std::size_t i = 0; i < rows; ++i) proj += u(i, a) * v[i];
          for (std::size_t i = 0; i < rows; ++i) v[i] -= proj * u(i, a);
        }
      }
      double norm = std::sqrt(dot(v.data(), v.data(), rows));
      if (norm > 0.5) {
        for (std::size_t i = 0; i < rows; ++i) u(i, j) = v[i] / norm;
        accepted.push_back(j);
        ++candidate;
        break;
      }
    }
  }
}

}  // namespace

Matrix SvdResult::reconstruct() const {
  Matrix scaled = vt;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (double& v : scaled.row(i)) v *= sigma[i];
  return matmul(u, scaled);
}

FactorPair FactorPair::leading(std::size_t r) const {
  if (r < 1 || r > rank())
    throw RankRangeError("leading rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(rank()) + "]");
  return {u.col_block(0, r), s.row_block(0, r)};
}

SvdResult svd(const Matrix& m) {
  if (m.empty()) throw ShapeError("svd: empty matrix");
  if (!m.all_finite()) throw NumericalError("svd: input contains non-finite entries");

  const bool transposed = m.rows() < m.cols();
  // Work on a tall matrix a (rows >= cols), stored column-wise as rows of w.
  Matrix w = transposed ? m : m.transpose();
  const std::size_t tall_rows = w.cols();
  const std::size_t k = w.rows();
  Matrix vt = Matrix::identity(k);

  const double fro = frobenius_norm(m);
  const double negligible = 1e-12 * fro;
  const double negligible_sq = negligible * negligible;
  const double tol = std::numeric_limits<double>::epsilon() * static_cast<double>(tall_rows);

  bool converged = false;
  double worst = 0.0;
  for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      double* wp = w.row(p).data();
      for (std::size_t q = p + 1; q < k; ++q) {
        double* wq = w.row(q).data();
        const double alpha = dot(wp, wp, tall_rows);
        const double beta = dot(wq, wq, tall_rows);
        if (alpha <= negligible_sq || beta <= negligible_sq) continue;
        const double gamma = dot(wp, wq, tall_rows);
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        if (off <= tol) continue;
        worst = std::max(worst, off);
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(wp, wq, tall_rows, c, s);
        rotate(vt.row(p).data(), vt.row(q).data(), k, c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged)
    throw NumericalError("svd: no convergence after " + std::to_string(kSvdMaxSweeps) +
                             " sweeps, residual off-diagonal " + std::to_string(worst),
                         worst);

  std::vector<double> norms(k);
  for (std::size_t j = 0; j < k; ++j) norms[j] = std::sqrt(dot(w.row(j).data(), w.row(j).data(), tall_rows));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  // Left vectors of the tall problem (tall_rows x k) and right vectors (k x k).
  Matrix left(tall_rows, k);
  Matrix right_t(k, k);
  std::vector<double> sigma(k);
  std::vector<bool> missing(k, false);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    sigma[j] = norms[src];
    const double* col = w.row(src).data();
    if (sigma[j] > negligible && sigma[j] > 0.0) {
      for (std::size_t i = 0; i < tall_rows; ++i) left(i, j) = col[i] / sigma[j];
    } else {
      missing[j] = true;
    }
    std::copy(vt.row(src).begin(), vt.row(src).end(), right_t.row(j).begin());
  }
  complete_basis(left, missing);

  SvdResult result;
  result.sigma = std::move(sigma);
  if (transposed) {
    // m^T = left * S * right_t  =>  m = right_t^T * S * left^T
    result.u = right_t.transpose();
    result.vt = left.transpose();
  } else {
    result.u = std::move(left);
    result.vt = std::move(right_t);
  }

  // Sign convention: the largest-magnitude entry of each left vector is >= 0.
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < result.u.rows(); ++i) {
      const double a = std::abs(result.u(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (result.u(arg, j) < 0.0) {
      for (std::size_t i = 0; i < result.u.rows(); ++i) result.u(i, j) = -result.u(i, j);
      for (double& v : result.vt.row(j)) v = -v;
    }
  }
  return result;
}

FactorPair truncated_factor(const SvdResult& d, std::size_t r) {
  const std::size_t k = d.sigma.size();
  if (r < 1 || r > k)
    throw RankRangeError("rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
  FactorPair f{d.u.col_block(0, r), d.vt.row_block(0, r)};
  if (d.sigma.front() == 0.0) {
    f.u.fill(0.0);
    f.s.fill(0.0);
    return f;
  }
  for (std::size_t i = 0; i < r; ++i)
    for (double& v : f.s.row(i)) v *= d.sigma[i];
  return f;
}

FactorPair truncated_factor(const Matrix& w, std::size_t r) {
  const std::size_t k = std::min(w.rows(), w.cols());
  if (r < 1 || r > k)
    throw RankRangeError("rank " + std::to_string(r) + " outside [1, " + std::to_string(k) +
                         "] for " + w.shape_string());
  return truncated_factor(svd(w), r);
}

double tail_energy(std::span<const double> sigma, std::size_t r) {
  double s = 0.0;
  for (std::size_t i = r; i < sigma.size(); ++i) s += sigma[i] * sigma[i];
  return std::sqrt(s);
}

std::vector<double> cumulative_spectrum(std::span<const double> sigma) {
  if (sigma.empty()) throw DegenerateSpectrumError("empty spectrum");
  double total = 0.0;
  for (double s : sigma) {
    if (!(s >= 0.0) || !std::isfinite(s))
      throw DegenerateSpectrumError("singular values must be finite and non-negative");
    total += s;
  }
  if (total <= 0.0) throw DegenerateSpectrumError("all-zero spectrum");
  std::vector<double> out(sigma.size());
  double running = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    running += sigma[i];
    out[i] = running / total;
  }
  out.back() = 1.0;
  return out;
}

std::size_t rank_at_threshold(std::span<const double> sigma, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ContractError("threshold must lie in (0, 1]");
  const auto cum = cumulative_spectrum(sigma);
  for (std::size_t i = 0; i < cum.size(); ++i)
    if (cum[i] >= tau - 1e-12) return i + 1;
  return cum.size();
}

std::size_t numerical_rank(const Matrix& m, double tol) {
  const SvdResult d = svd(m);
  if (d.sigma.front() == 0.0) return 0;
  const double cut = tol * d.sigma.front();
  return static_cast<std::size_t>(
      std::count_if(d.sigma.begin(), d.sigma.end(), [&](double s) { return s >= cut; }));
}

}  // namespace comcat::linalg
