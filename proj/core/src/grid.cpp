#include "nis/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nis/error.hpp"

namespace nis {

Grid2D::Grid2D(std::size_t nx, std::size_t ny, double dx) : nx_(nx), ny_(ny), dx_(dx) {
  if (nx < 3 || ny < 3) {
    std::ostringstream os;
    os << "grid must have at least 3x3 nodes, got " << nx << "x" << ny;
    throw InvalidArgument(os.str());
  }
  if (!(dx > 0.0) || !std::isfinite(dx)) {
    throw InvalidArgument("grid spacing must be positive and finite");
  }
}

Field::Field(const Grid2D& grid, double fill) : grid_(grid), values_(grid.size(), fill) {}

Field::Field(const Grid2D& grid, std::vector<double> values)
    : grid_(grid), values_(std::move(values)) {
  if (values_.size() != grid_.size()) {
    std::ostringstream os;
    os << "field has " << values_.size() << " values but grid has " << grid_.size() << " nodes";
    throw GridMismatch(os.str());
  }
}

bool Field::is_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Field::fill(double v) noexcept { std::fill(values_.begin(), values_.end(), v); }

Field& Field::operator+=(const Field& other) {
  require_same_grid(grid_, other.grid_, "field addition");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

Field& Field::operator-=(const Field& other) {
  require_same_grid(grid_, other.grid_, "field subtraction");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

Field& Field::operator*=(double s) noexcept {
  for (double& v : values_) v *= s;
  return *this;
}

Field& Field::axpy(double s, const Field& other) {
  require_same_grid(grid_, other.grid_, "axpy");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * other.values_[i];
  return *this;
}

void require_same_grid(const Grid2D& a, const Grid2D& b, const char* what) {
  if (a != b) {
    std::ostringstream os;
    os << what << ": grid mismatch (" << a.nx() << "x" << a.ny() << ", dx=" << a.dx() << " vs "
       << b.nx() << "x" << b.ny() << ", dx=" << b.dx() << ")";
    throw GridMismatch(os.str());
  }
}

double dot(const Field& a, const Field& b) {
  require_same_grid(a.grid(), b.grid(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const Field& field, NormKind kind) {
  const auto v = field.values();
  switch (kind) {
    case NormKind::inf: {
      double m = 0.0;
      for (double x : v) m = std::max(m, std::abs(x));
      return m;
    }
    case NormKind::l2: {
      double s = 0.0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    }
    case NormKind::mse: {
      double s = 0.0;
      for (double x : v) s += x * x;
      return s / static_cast<double>(v.size());
    }
  }
  return 0.0;
}

BoundaryMask::BoundaryMask(const Grid2D& grid, std::vector<std::uint8_t> mask)
    : grid_(grid), mask_(std::move(mask)) {
  if (mask_.size() != grid_.size()) throw GridMismatch("mask length does not match grid");
  for (auto m : mask_) {
    if (m > 1) throw InvalidArgument("mask entries must be 0 or 1");
  }
}

std::size_t BoundaryMask::interior_count() const noexcept {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

BoundaryMask make_boundary_mask(const Grid2D& grid) {
  std::vector<std::uint8_t> m(grid.size(), 0);
  for (std::size_t iy = 1; iy + 1 < grid.ny(); ++iy) {
    for (std::size_t ix = 1; ix + 1 < grid.nx(); ++ix) m[grid.index(ix, iy)] = 1;
  }
  return BoundaryMask(grid, std::move(m));
}

Field project(const BoundaryMask& mask, const Field& interior, const Field& boundary) {
  Field out = interior;
  project_inplace(mask, out, boundary);
  return out;
}

void project_inplace(const BoundaryMask& mask, Field& field, const Field& boundary) {
  require_same_grid(mask.grid(), field.grid(), "project");
  require_same_grid(mask.grid(), boundary.grid(), "project");
  const auto m = mask.values();
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (!m[i]) field[i] = boundary[i];
  }
}

}  // namespace nis
