#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace nis {

/// Uniform node-centred 2-D mesh with spacing dx in both axes.
class Grid2D {
 public:
  Grid2D(std::size_t nx, std::size_t ny, double dx);

  std::size_t nx() const noexcept { return nx_; }
  std::size_t ny() const noexcept { return ny_; }
  double dx() const noexcept { return dx_; }
  std::size_t size() const noexcept { return nx_ * ny_; }
  double extent_x() const noexcept { return static_cast<double>(nx_ - 1) * dx_; }
  double extent_y() const noexcept { return static_cast<double>(ny_ - 1) * dx_; }

  /// Row-major: index = iy * nx + ix.
  std::size_t index(std::size_t ix, std::size_t iy) const noexcept { return iy * nx_ + ix; }

  bool operator==(const Grid2D&) const = default;

 private:
  std::size_t nx_;
  std::size_t ny_;
  double dx_;
};

class Field {
 public:
  explicit Field(const Grid2D& grid, double fill = 0.0);
  Field(const Grid2D& grid, std::vector<double> values);

  const Grid2D& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& at(std::size_t ix, std::size_t iy) noexcept { return values_[grid_.index(ix, iy)]; }
  double at(std::size_t ix, std::size_t iy) const noexcept { return values_[grid_.index(ix, iy)]; }

  bool is_finite() const noexcept;
  void fill(double v) noexcept;

  Field& operator+=(const Field& other);
  Field& operator-=(const Field& other);
  Field& operator*=(double s) noexcept;
  /// this += s * other
  Field& axpy(double s, const Field& other);

  friend Field operator+(Field a, const Field& b) { return a += b; }
  friend Field operator-(Field a, const Field& b) { return a -= b; }
  friend Field operator*(double s, Field a) { return a *= s; }

  bool operator==(const Field& other) const = default;

 private:
  Grid2D grid_;
  std::vector<double> values_;
};

/// Throws GridMismatch naming `what` when the grids differ.
void require_same_grid(const Grid2D& a, const Grid2D& b, const char* what);

double dot(const Field& a, const Field& b);

enum class NormKind { inf, l2, mse };

/// mse = sum(v^2) / (nx * ny).
double norm(const Field& field, NormKind kind);

/// Binary mask G: 1 on interior nodes, 0 on Dirichlet nodes.
class BoundaryMask {
 public:
  /// Arbitrary 0/1 mask; entries outside {0,1} throw InvalidArgument.
  BoundaryMask(const Grid2D& grid, std::vector<std::uint8_t> mask);

  const Grid2D& grid() const noexcept { return grid_; }
  bool interior(std::size_t i) const noexcept { return mask_[i] != 0; }
  std::span<const std::uint8_t> values() const noexcept { return mask_; }
  std::size_t interior_count() const noexcept;

 private:
  Grid2D grid_;
  std::vector<std::uint8_t> mask_;
};

/// Zero on the outermost node ring, one elsewhere.
BoundaryMask make_boundary_mask(const Grid2D& grid);

/// mask * interior + (1 - mask) * boundary, selecting rather than blending
/// so that boundary values are copied bit-exactly.
Field project(const BoundaryMask& mask, const Field& interior, const Field& boundary);

/// In-place variant of project: overwrites masked-out entries of `field`.
void project_inplace(const BoundaryMask& mask, Field& field, const Field& boundary);

}  // namespace nis
