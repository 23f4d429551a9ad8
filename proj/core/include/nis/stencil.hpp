#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nis/grid.hpp"

namespace nis {

/// Square (2r+1)x(2r+1) finite-difference kernel applied by cross-correlation.
///
/// Kernel storage is row-major with rows along y: weight(dy, dx) multiplies
/// f(ix + dx, iy + dy). `order` is the power of the grid spacing that scales
/// the discrete operator when it enters the PDE.
class StencilOp {
 public:
  StencilOp(std::vector<double> kernel, std::size_t radius, int order, std::string name = {});

  std::size_t radius() const noexcept { return radius_; }
  std::size_t width() const noexcept { return 2 * radius_ + 1; }
  int order() const noexcept { return order_; }
  const std::string& name() const noexcept { return name_; }
  std::span<const double> kernel() const noexcept { return kernel_; }

  /// Weight for offset (dx, dy) with |dx|, |dy| <= radius.
  double weight(int dx, int dy) const noexcept;
  /// Centre entry, the diagonal of the materialised operator.
  double central() const noexcept { return weight(0, 0); }

  /// Same kernel with its centre entry set to zero.
  StencilOp off_diagonal() const;
  /// Kernel flipped in both axes (the adjoint under zero padding).
  StencilOp flipped() const;
  StencilOp scaled(double s) const;

  bool operator==(const StencilOp&) const = default;

 private:
  std::vector<double> kernel_;
  std::size_t radius_;
  int order_;
  std::string name_;
};

/// Central differences for first and second derivatives along x and y.
struct CentralDifferenceOps {
  StencilOp dx;   // (-1/2, 0, 1/2) along x, order 1
  StencilOp dy;   // same along y
  StencilOp dxx;  // (1, -2, 1) along x, order 2
  StencilOp dyy;  // same along y
};

CentralDifferenceOps central_diff_ops_2d();

/// Zero-padded cross-correlation of `f` with the kernel.
Field apply(const StencilOp& op, const Field& f);
/// out += scale * apply(op, f), without allocating.
void apply_accumulate(const StencilOp& op, const Field& f, double scale, Field& out);
Field apply_adjoint(const StencilOp& op, const Field& f);
/// apply() with the centre weight removed.
Field off_diag_apply(const StencilOp& op, const Field& f);

/// Spectral norm of the zero-padded off-diagonal operator on `grid`.
/// Results are memoised per (kernel, grid).
double off_diag_norm(const StencilOp& op, const Grid2D& grid);

}  // namespace nis
