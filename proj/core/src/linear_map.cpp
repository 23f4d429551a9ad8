#include "nis/linear_map.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

#include "nis/error.hpp"

namespace nis::spectral {

namespace {

Field random_unit_field(const Grid2D& grid, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Field v(grid);
  for (double& x : v.values()) x = dist(rng);
  v *= 1.0 / norm(v, NormKind::l2);
  return v;
}

std::uint64_t probe_seed(std::uint64_t seed, std::size_t probe) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(probe)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Largest modulus among the eigenvalues of [[a, b], [c, d]].
double max_modulus_2x2(double a, double b, double c, double d) {
  const double tr = a + d;
  const double det = a * d - b * c;
  const double disc = tr * tr / 4.0 - det;
  if (disc >= 0.0) {
    const double s = std::sqrt(disc);
    return std::max(std::abs(tr / 2.0 + s), std::abs(tr / 2.0 - s));
  }
  return std::sqrt(std::max(det, 0.0));
}

}  // namespace

namespace {

// Largest eigenvalue of the symmetric tridiagonal matrix (a, b) by Sturm
// bisection, then its eigenvector by inverse iteration on the dense copy.
struct TridiagEig {
  double value = 0.0;
  std::vector<double> vector;
};

std::size_t sturm_count_below(const std::vector<double>& a, const std::vector<double>& b,
                              double x) {
  std::size_t count = 0;
  double q = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double off = i == 0 ? 0.0 : b[i - 1] * b[i - 1];
    q = a[i] - x - (i == 0 ? 0.0 : off / q);
    if (q == 0.0) q = -std::numeric_limits<double>::min();
    if (q < 0.0) ++count;
  }
  return count;
}

TridiagEig largest_tridiag_eig(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t k = a.size();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < k; ++i) {
    const double r = (i > 0 ? std::abs(b[i - 1]) : 0.0) + (i + 1 < k ? std::abs(b[i]) : 0.0);
    lo = std::min(lo, a[i] - r);
    hi = std::max(hi, a[i] + r);
  }
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (sturm_count_below(a, b, mid) == k)
      hi = mid;
    else
      lo = mid;
  }
  TridiagEig out;
  out.value = hi;

  const double shift = hi + std::max(std::abs(hi), 1e-300) * 1e-12;
  std::vector<double> y(k, 1.0 / std::sqrt(static_cast<double>(k)));
  for (int pass = 0; pass < 3; ++pass) {
    // dense (T - shift I) x = y with partial pivoting
    std::vector<double> m(k * k, 0.0), rhs = y;
    for (std::size_t i = 0; i < k; ++i) {
      m[i * k + i] = a[i] - shift;
      if (i + 1 < k) m[i * k + i + 1] = m[(i + 1) * k + i] = b[i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r < k; ++r)
        if (std::abs(m[r * k + c]) > std::abs(m[piv * k + c])) piv = r;
      if (piv != c) {
        for (std::size_t j = 0; j < k; ++j) std::swap(m[c * k + j], m[piv * k + j]);
        std::swap(rhs[c], rhs[piv]);
      }
      if (m[c * k + c] == 0.0) m[c * k + c] = std::numeric_limits<double>::min();
      for (std::size_t r = c + 1; r < k; ++r) {
        const double f = m[r * k + c] / m[c * k + c];
        if (f == 0.0) continue;
        for (std::size_t j = c; j < k; ++j) m[r * k + j] -= f * m[c * k + j];
        rhs[r] -= f * rhs[c];
      }
    }
    for (std::size_t c = k; c-- > 0;) {
      double s = rhs[c];
      for (std::size_t j = c + 1; j < k; ++j) s -= m[c * k + j] * y[j];
      y[c] = s / m[c * k + c];
    }
    double n = 0.0;
    for (double v : y) n += v * v;
    n = std::sqrt(n);
    if (!(n > 0.0) || !std::isfinite(n)) break;
    for (double& v : y) v /= n;
  }
  out.vector = std::move(y);
  return out;
}

}  // namespace

// Restarted Lanczos on A^T A with full reorthogonalisation. Each restart
// begins from the previous Ritz vector, so the estimate never decreases.
NormEstimate op_norm(const LinearMap& map, const PowerOptions& options) {
  if (!map.has_adjoint()) throw InvalidArgument("op_norm requires an adjoint");
  NormEstimate est;
  const std::size_t n = map.dim();
  const std::size_t krylov = std::min<std::size_t>(n, 40);
  Field start = random_unit_field(map.grid, options.seed);
  double theta_prev = 0.0;
  std::size_t restarts = 0;
  std::vector<Field> basis;
  while (est.iterations < std::max<std::size_t>(options.max_iter, 1)) {
    basis.clear();
    basis.push_back(start);
    std::vector<double> alpha, beta;
    bool invariant = false;
    for (std::size_t j = 0; j < krylov; ++j) {
      Field w = map.adjoint(map.forward(basis[j]));
      ++est.iterations;
      if (!w.is_finite()) throw NumericalFailure("op_norm: non-finite iterate");
      const double aj = dot(basis[j], w);
      alpha.push_back(aj);
      w.axpy(-aj, basis[j]);
      if (j > 0) w.axpy(-beta[j - 1], basis[j - 1]);
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& q : basis) w.axpy(-dot(q, w), q);
      const double bj = norm(w, NormKind::l2);
      double scale = 0.0;
      for (double x : alpha) scale = std::max(scale, std::abs(x));
      if (bj <= 1e-13 * std::max(scale, std::numeric_limits<double>::min()) || j + 1 == n) {
        invariant = true;
        break;
      }
      beta.push_back(bj);
      if (j + 1 < krylov) {
        w *= 1.0 / bj;
        basis.push_back(std::move(w));
      }
    }
    ++restarts;
    const std::size_t k = alpha.size();
    std::vector<double> offd(beta.begin(), beta.begin() + static_cast<std::ptrdiff_t>(k - 1));
    const auto eig = largest_tridiag_eig(alpha, offd);
    const double theta = std::max(eig.value, 0.0);
    est.value = std::sqrt(theta);
    if (theta == 0.0) {
      est.rel_change = 0.0;
      est.converged = true;
      return est;
    }
    const double residual = invariant ? 0.0 : beta[k - 1] * std::abs(eig.vector[k - 1]);
    est.rel_change = std::abs(theta - theta_prev) / theta;
    theta_prev = theta;
    if (residual <= 1e-10 * theta || (restarts > 1 && est.rel_change < options.tol)) {
      est.converged = true;
      return est;
    }
    Field ritz(map.grid);
    for (std::size_t i = 0; i < k; ++i) ritz.axpy(eig.vector[i], basis[i]);
    const double rn = norm(ritz, NormKind::l2);
    if (!(rn > 0.0)) break;
    ritz *= 1.0 / rn;
    start = std::move(ritz);
  }
  return est;
}

RadiusEstimate spectral_radius(const LinearMap& map, std::size_t iters, std::size_t probes,
                               std::uint64_t seed) {
  if (iters < 8) iters = 8;
  if (probes == 0) probes = 1;
  RadiusEstimate out;
  for (std::size_t p = 0; p < probes; ++p) {
    Field v = random_unit_field(map.grid, probe_seed(seed, p));
    std::vector<double> log_norm;  // cumulative log growth after each step
    log_norm.reserve(iters);
    double cum = 0.0;
    bool nilpotent = false;
    for (std::size_t it = 0; it < iters; ++it) {
      Field av = map.forward(v);
      const double n = norm(av, NormKind::l2);
      if (n == 0.0) {
        nilpotent = true;
        break;
      }
      if (!std::isfinite(n)) {
        out.value = std::numeric_limits<double>::infinity();
        out.overflow = true;
        std::ostringstream os;
        os << "probe " << p << ": iterate norm overflowed at iteration " << it;
        out.diagnostic = os.str();
        out.iterations += it;
        return out;
      }
      cum += std::log(n);
      log_norm.push_back(cum);
      av *= 1.0 / n;
      v = std::move(av);
    }
    out.iterations += log_norm.size();
    if (nilpotent) continue;  // contributes 0

    // Least-squares slope of the cumulative log norm over the last quarter.
    const std::size_t n = log_norm.size();
    const std::size_t start = n - std::max<std::size_t>(n / 4, 2);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = start; i < n; ++i) {
      const double x = static_cast<double>(i - start);
      sx += x;
      sy += log_norm[i];
      sxx += x * x;
      sxy += x * log_norm[i];
    }
    const double m = static_cast<double>(n - start);
    const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    double estimate = std::exp(slope);

    // Two-dimensional Ritz refinement on span{v, Av}.
    Field av = map.forward(v);
    const double a11 = dot(v, av);
    Field q2 = av;
    q2.axpy(-a11, v);
    const double q2n = norm(q2, NormKind::l2);
    const double scale = norm(av, NormKind::l2);
    if (scale > 0.0 && q2n > 1e-10 * scale) {
      q2 *= 1.0 / q2n;
      Field aq2 = map.forward(q2);
      const double a12 = dot(v, aq2);
      const double a21 = dot(q2, av);
      const double a22 = dot(q2, aq2);
      // residual of A Q - Q H
      Field r1 = av;
      r1.axpy(-a11, v).axpy(-a21, q2);
      Field r2 = aq2;
      r2.axpy(-a12, v).axpy(-a22, q2);
      const double res = std::sqrt(dot(r1, r1) + dot(r2, r2));
      const double ritz = max_modulus_2x2(a11, a12, a21, a22);
      if (res <= 1e-9 * std::max(ritz, 1e-300)) estimate = ritz;
    } else if (scale > 0.0) {
      estimate = std::abs(a11);
    }
    out.value = std::max(out.value, estimate);
  }
  return out;
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

std::vector<double> DenseMatrix::multiply(const std::vector<double>& x) const {
  if (x.size() != cols_) throw InvalidArgument("dense multiply: size mismatch");
  std::vector<double> y(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    double s = 0.0;
    const double* row = &data_[r * cols_];
    for (std::size_t c = 0; c < cols_; ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw InvalidArgument("dense add: shape");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw InvalidArgument("dense sub: shape");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

DenseMatrix operator*(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols_ != b.rows_) throw InvalidArgument("dense matmul: shape");
  DenseMatrix c(a.rows_, b.cols_);
  for (std::size_t i = 0; i < a.rows_; ++i) {
    double* crow = &c.data_[i * c.cols_];
    for (std::size_t k = 0; k < a.cols_; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b.data_[k * b.cols_];
      for (std::size_t j = 0; j < b.cols_; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

DenseMatrix& DenseMatrix::scale_rows(const std::vector<double>& d) {
  if (d.size() != rows_) throw InvalidArgument("scale_rows: size mismatch");
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) data_[r * cols_ + c] *= d[r];
  return *this;
}

namespace {

DenseMatrix densify_with(const Grid2D& grid, const std::function<Field(const Field&)>& f) {
  const std::size_t n = grid.size();
  if (n > kMaxDenseDim) {
    std::ostringstream os;
    os << "densify: dimension " << n << " exceeds guard " << kMaxDenseDim;
    throw InvalidArgument(os.str());
  }
  DenseMatrix m(n, n);
  Field e(grid);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const Field col = f(e);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) m(i, j) = col[i];
  }
  return m;
}

}  // namespace

DenseMatrix densify(const LinearMap& map) { return densify_with(map.grid, map.forward); }

DenseMatrix densify_adjoint(const LinearMap& map) {
  if (!map.has_adjoint()) throw InvalidArgument("densify_adjoint: no adjoint");
  return densify_with(map.grid, map.adjoint);
}

LinearMap dense_map(const Grid2D& grid, DenseMatrix m) {
  if (m.rows() != grid.size() || m.cols() != grid.size())
    throw InvalidArgument("dense_map: matrix does not match grid");
  auto fwd = std::make_shared<const DenseMatrix>(std::move(m));
  auto adj = std::make_shared<const DenseMatrix>(fwd->transposed());
  auto wrap = [grid](std::shared_ptr<const DenseMatrix> a) {
    return [grid, a](const Field& v) {
      std::vector<double> x(v.values().begin(), v.values().end());
      return Field(grid, a->multiply(x));
    };
  };
  return LinearMap{grid, wrap(fwd), wrap(adj)};
}

}  // namespace nis::spectral
