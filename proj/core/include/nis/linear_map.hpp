#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nis/grid.hpp"

namespace nis::spectral {

/// Matrix-free linear operator on fields of one grid.
struct LinearMap {
  Grid2D grid;
  std::function<Field(const Field&)> forward;
  /// Empty when the adjoint is unavailable.
  std::function<Field(const Field&)> adjoint;

  std::size_t dim() const noexcept { return grid.size(); }
  bool has_adjoint() const noexcept { return static_cast<bool>(adjoint); }
};

struct PowerOptions {
  std::size_t max_iter = 20000;
  /// Stop when the estimate changes by less than tol (relative) between restarts.
  double tol = 1e-13;
  std::uint64_t seed = 0x5eed;
};

struct NormEstimate {
  double value = 0.0;
  std::size_t iterations = 0;
  /// Relative change of the squared estimate between the last two restarts.
  double rel_change = 0.0;
  /// False when max_iter was hit before the Ritz residual or rel_change settled.
  bool converged = false;
};

/// Largest singular value by restarted Lanczos on A^T A; `iterations` counts
/// forward/adjoint pairs.
/// Throws InvalidArgument when the map has no adjoint.
NormEstimate op_norm(const LinearMap& map, const PowerOptions& options = {});

struct RadiusEstimate {
  double value = 0.0;
  std::size_t iterations = 0;
  /// Norm growth overflowed or became NaN; value is +infinity.
  bool overflow = false;
  std::string diagnostic;
};

/// Dominant eigenvalue modulus from `probes` seeded power iterations.
///
/// Each probe renormalises v <- Av and fits the log-norm growth over the last
/// quarter of its iterations. When the last two iterates span an (almost)
/// invariant subspace, the 2x2 Ritz values replace the fit, which resolves
/// complex-conjugate and +-lambda dominant pairs exactly.
RadiusEstimate spectral_radius(const LinearMap& map, std::size_t iters, std::size_t probes = 4,
                               std::uint64_t seed = 0x5eed);

/// Row-major dense matrix used as a test oracle on small grids.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  const std::vector<double>& data() const noexcept { return data_; }

  DenseMatrix transposed() const;
  std::vector<double> multiply(const std::vector<double>& x) const;
  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double s);

  friend DenseMatrix operator*(const DenseMatrix& a, const DenseMatrix& b);
  friend DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
  friend DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
  friend DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

  /// Left-multiply by diag(d).
  DenseMatrix& scale_rows(const std::vector<double>& d);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline constexpr std::size_t kMaxDenseDim = 4096;

/// Column-by-column materialisation through unit impulses (dim <= 4096).
DenseMatrix densify(const LinearMap& map);
/// Materialises the adjoint instead of the forward map.
DenseMatrix densify_adjoint(const LinearMap& map);

/// Wraps a dense matrix acting on fields of `grid`, with its transpose as adjoint.
LinearMap dense_map(const Grid2D& grid, DenseMatrix m);

}  // namespace nis::spectral
