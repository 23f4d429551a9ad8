#include "nis/stencil.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <tuple>

#include "nis/error.hpp"
#include "nis/linear_map.hpp"

namespace nis {

StencilOp::StencilOp(std::vector<double> kernel, std::size_t radius, int order, std::string name)
    : kernel_(std::move(kernel)), radius_(radius), order_(order), name_(std::move(name)) {
  if (radius_ == 0) throw InvalidArgument("stencil radius must be at least 1");
  if (kernel_.size() != width() * width()) {
    std::ostringstream os;
    os << "stencil kernel has " << kernel_.size() << " entries, expected " << width() * width();
    throw InvalidArgument(os.str());
  }
  if (order_ < 0) throw InvalidArgument("stencil order must be non-negative");
  for (double w : kernel_) {
    if (!std::isfinite(w)) throw InvalidArgument("stencil kernel must be finite");
  }
}

double StencilOp::weight(int dx, int dy) const noexcept {
  const auto r = static_cast<int>(radius_);
  const auto w = static_cast<int>(width());
  return kernel_[static_cast<std::size_t>((dy + r) * w + (dx + r))];
}

StencilOp StencilOp::off_diagonal() const {
  auto k = kernel_;
  k[radius_ * width() + radius_] = 0.0;
  return StencilOp(std::move(k), radius_, order_, name_);
}

StencilOp StencilOp::flipped() const {
  auto k = kernel_;
  std::reverse(k.begin(), k.end());
  return StencilOp(std::move(k), radius_, order_, name_);
}

StencilOp StencilOp::scaled(double s) const {
  auto k = kernel_;
  for (double& w : k) w *= s;
  return StencilOp(std::move(k), radius_, order_, name_);
}

CentralDifferenceOps central_diff_ops_2d() {
  return CentralDifferenceOps{
      StencilOp({0, 0, 0, -0.5, 0, 0.5, 0, 0, 0}, 1, 1, "dx"),
      StencilOp({0, -0.5, 0, 0, 0, 0, 0, 0.5, 0}, 1, 1, "dy"),
      StencilOp({0, 0, 0, 1, -2, 1, 0, 0, 0}, 1, 2, "dxx"),
      StencilOp({0, 1, 0, 0, -2, 0, 0, 1, 0}, 1, 2, "dyy"),
  };
}

namespace {

void check_fits(const StencilOp& op, const Grid2D& g) {
  if (op.width() > std::min(g.nx(), g.ny())) {
    std::ostringstream os;
    os << "stencil of width " << op.width() << " does not fit a " << g.nx() << "x" << g.ny()
       << " grid";
    throw InvalidArgument(os.str());
  }
}

}  // namespace

void apply_accumulate(const StencilOp& op, const Field& f, double scale, Field& out) {
  const Grid2D& g = f.grid();
  check_fits(op, g);
  require_same_grid(g, out.grid(), "stencil apply");
  const auto r = static_cast<int>(op.radius());
  const auto nx = static_cast<int>(g.nx());
  const auto ny = static_cast<int>(g.ny());
  const double* src = f.data();
  double* dst = out.data();
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double w = scale * op.weight(dx, dy);
      if (w == 0.0) continue;
      const int y0 = std::max(0, -dy), y1 = std::min(ny, ny - dy);
      const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
      for (int iy = y0; iy < y1; ++iy) {
        double* o = dst + static_cast<std::ptrdiff_t>(iy) * nx;
        const double* s = src + static_cast<std::ptrdiff_t>(iy + dy) * nx + dx;
        for (int ix = x0; ix < x1; ++ix) o[ix] += w * s[ix];
      }
    }
  }
}

Field apply(const StencilOp& op, const Field& f) {
  Field out(f.grid());
  apply_accumulate(op, f, 1.0, out);
  return out;
}

Field apply_adjoint(const StencilOp& op, const Field& f) { return apply(op.flipped(), f); }

Field off_diag_apply(const StencilOp& op, const Field& f) { return apply(op.off_diagonal(), f); }

double off_diag_norm(const StencilOp& op, const Grid2D& grid) {
  check_fits(op, grid);
  using Key = std::tuple<std::vector<double>, std::size_t, std::size_t, double>;
  static std::mutex mutex;
  static std::map<Key, double> cache;

  const StencilOp off = op.off_diagonal();
  Key key{std::vector<double>(off.kernel().begin(), off.kernel().end()), grid.nx(), grid.ny(),
          grid.dx()};
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }

  const StencilOp adj = off.flipped();
  spectral::LinearMap map{grid, [off](const Field& v) { return apply(off, v); },
                          [adj](const Field& v) { return apply(adj, v); }};
  spectral::PowerOptions opts;
  opts.max_iter = 200000;
  opts.tol = 1e-13;
  const auto est = spectral::op_norm(map, opts);
  if (!est.converged && est.rel_change > 1e-9) {
    throw NonConvergence("off_diag_norm: norm iteration did not converge", est.iterations,
                         est.rel_change);
  }
  std::lock_guard lock(mutex);
  cache.emplace(std::move(key), est.value);
  return est.value;
}

}  // namespace nis
