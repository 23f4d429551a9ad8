#include "nis/semi_implicit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nis/error.hpp"

namespace nis {

void PdeProblem::validate() const {
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidArgument("eps must lie in (0, 1]");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("dt must be positive");
  require_same_grid(grid, mask.grid(), "problem mask");
  require_same_grid(grid, boundary.grid(), "problem boundary");
  if (!boundary.is_finite()) throw InvalidArgument("boundary values must be finite");
  for (const auto& t : terms) {
    require_same_grid(grid, t.coefficient.grid(), "term coefficient");
    if (!t.coefficient.is_finite()) throw InvalidArgument("term coefficients must be finite");
    if (t.op.width() > std::min(grid.nx(), grid.ny()))
      throw InvalidArgument("stencil does not fit the grid");
  }
}

PdeProblem make_advection_diffusion(const Grid2D& grid, const AdvectionDiffusionCoefficients& c,
                                    double dt, double eps) {
  const auto ops = central_diff_ops_2d();
  PdeProblem p{grid, make_boundary_mask(grid), {}, Field(grid), eps, dt};
  p.terms.push_back({Field(grid, c.vx), ops.dx});
  p.terms.push_back({Field(grid, c.vy), ops.dy});
  p.terms.push_back({Field(grid, c.dxx), ops.dxx});
  p.terms.push_back({Field(grid, c.dyy), ops.dyy});
  p.validate();
  return p;
}

Field build_inverse_preconditioner(const PdeProblem& problem) {
  problem.validate();
  const double h = problem.grid.dx();
  Field diag(problem.grid, 1.0);
  for (const auto& t : problem.terms) {
    const double s = problem.dt * problem.eps * t.op.central() / std::pow(h, t.op.order());
    if (s == 0.0) continue;
    diag.axpy(-s, t.coefficient);
  }
  for (std::size_t i = 0; i < diag.size(); ++i) {
    if (std::abs(diag[i]) < 1e-14) {
      std::ostringstream os;
      os << "singular preconditioner at node " << i << " (ix=" << i % problem.grid.nx()
         << ", iy=" << i / problem.grid.nx() << "), diagonal " << diag[i];
      throw SingularPreconditioner(os.str(), i);
    }
    diag[i] = 1.0 / diag[i];
  }
  return diag;
}

std::vector<Field> build_term_weights(const PdeProblem& problem) {
  const Field inv = build_inverse_preconditioner(problem);
  const double h = problem.grid.dx();
  std::vector<Field> out;
  out.reserve(problem.terms.size());
  for (const auto& t : problem.terms) {
    const double s = problem.dt * problem.eps / std::pow(h, t.op.order());
    Field w(problem.grid);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * t.coefficient[i] * inv[i];
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

Field source_with(const PdeProblem& problem, const Field& inv, const Field& u_t) {
  require_same_grid(problem.grid, u_t.grid(), "build_source");
  Field rhs = u_t;
  const double h = problem.grid.dx();
  if (problem.eps < 1.0) {
    for (const auto& t : problem.terms) {
      const Field du = apply(t.op, u_t);
      const double s = problem.dt * (1.0 - problem.eps) / std::pow(h, t.op.order());
      for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] += s * t.coefficient[i] * du[i];
    }
  }
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] *= inv[i];
  return rhs;
}

}  // namespace

Field build_source(const PdeProblem& problem, const Field& u_t) {
  return source_with(problem, build_inverse_preconditioner(problem), u_t);
}

SemiImplicitIterator::SemiImplicitIterator(PdeProblem problem, const Field& u_t)
    : source_(problem.grid) {
  problem.validate();
  auto shared = std::make_shared<Shared>(Shared{std::move(problem), {}, Field(u_t.grid()), {}});
  shared->inverse_preconditioner = build_inverse_preconditioner(shared->problem);
  shared->weights = build_term_weights(shared->problem);
  for (const auto& t : shared->problem.terms) {
    std::vector<Tap> taps;
    const int r = static_cast<int>(t.op.radius());
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        if (dx == 0 && dy == 0) continue;
        const double w = t.op.weight(dx, dy);
        if (w != 0.0) taps.push_back({dx, dy, w});
      }
    shared->taps.push_back(std::move(taps));
  }
  source_ = source_with(shared->problem, shared->inverse_preconditioner, u_t);
  shared_ = std::move(shared);
}

SemiImplicitIterator::SemiImplicitIterator(std::shared_ptr<const Shared> shared, Field source)
    : shared_(std::move(shared)), source_(std::move(source)) {}

SemiImplicitIterator SemiImplicitIterator::with_previous_state(const Field& u_t) const {
  return SemiImplicitIterator(shared_,
                              source_with(problem(), shared_->inverse_preconditioner, u_t));
}

Field SemiImplicitIterator::source_adjoint(const Field& g) const {
  require_same_grid(grid(), g.grid(), "source_adjoint");
  const PdeProblem& p = problem();
  const Field& inv = shared_->inverse_preconditioner;
  Field z(g.grid());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = inv[i] * g[i];
  Field out = z;
  if (p.eps < 1.0) {
    const double h = p.grid.dx();
    for (const auto& t : p.terms) {
      const double s = p.dt * (1.0 - p.eps) / std::pow(h, t.op.order());
      Field scaled(g.grid());
      for (std::size_t i = 0; i < z.size(); ++i) scaled[i] = s * t.coefficient[i] * z[i];
      out += apply_adjoint(t.op, scaled);
    }
  }
  return out;
}

// out[i] += sum_t W_t[i] * sum_taps w * u[i + tap], row by row so that the
// inner loops stay contiguous.
void SemiImplicitIterator::accumulate_terms(const Field& u, double* out) const {
  const Grid2D& g = grid();
  const auto nx = static_cast<int>(g.nx());
  const auto ny = static_cast<int>(g.ny());
  const double* src = u.data();
  std::vector<double> row(static_cast<std::size_t>(nx));
  for (int iy = 0; iy < ny; ++iy) {
    double* o = out + static_cast<std::ptrdiff_t>(iy) * nx;
    for (std::size_t t = 0; t < shared_->taps.size(); ++t) {
      const auto& taps = shared_->taps[t];
      if (taps.empty()) continue;
      std::fill(row.begin(), row.end(), 0.0);
      for (const Tap& tap : taps) {
        const int sy = iy + tap.dy;
        if (sy < 0 || sy >= ny) continue;
        const int x0 = std::max(0, -tap.dx), x1 = std::min(nx, nx - tap.dx);
        const double* s = src + static_cast<std::ptrdiff_t>(sy) * nx + tap.dx;
        const double w = tap.w;
        for (int ix = x0; ix < x1; ++ix) row[ix] += w * s[ix];
      }
      const double* wt = shared_->weights[t].data() + static_cast<std::ptrdiff_t>(iy) * nx;
      for (int ix = 0; ix < nx; ++ix) o[ix] += wt[ix] * row[ix];
    }
  }
}

void SemiImplicitIterator::apply_into(const Field& u, Field& out) const {
  require_same_grid(grid(), u.grid(), "semi-implicit apply");
  require_same_grid(grid(), out.grid(), "semi-implicit apply");
  std::copy(source_.values().begin(), source_.values().end(), out.values().begin());
  accumulate_terms(u, out.data());
  project_inplace(problem().mask, out, problem().boundary);
}

Field SemiImplicitIterator::apply(const Field& u) const {
  Field out(grid());
  apply_into(u, out);
  return out;
}

void SemiImplicitIterator::homogeneous_apply_into(const Field& v, Field& out) const {
  require_same_grid(grid(), v.grid(), "homogeneous apply");
  out.fill(0.0);
  accumulate_terms(v, out.data());
  const auto m = problem().mask.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!m[i]) out[i] = 0.0;
}

Field SemiImplicitIterator::homogeneous_apply(const Field& v) const {
  Field out(grid());
  homogeneous_apply_into(v, out);
  return out;
}

Field SemiImplicitIterator::homogeneous_adjoint(const Field& v) const {
  require_same_grid(grid(), v.grid(), "homogeneous adjoint");
  const auto m = problem().mask.values();
  Field out(grid());
  Field scaled(grid());
  for (std::size_t t = 0; t < term_count(); ++t) {
    const Field& w = shared_->weights[t];
    for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = m[i] ? w[i] * v[i] : 0.0;
    apply_accumulate(problem().terms[t].op.off_diagonal().flipped(), scaled, 1.0, out);
  }
  return out;
}

spectral::LinearMap SemiImplicitIterator::homogeneous_map() const {
  auto self = *this;
  return spectral::LinearMap{grid(), [self](const Field& v) { return self.homogeneous_apply(v); },
                             [self](const Field& v) { return self.homogeneous_adjoint(v); }};
}

SolveResult fixed_point_solve(const SemiImplicitIterator& it, const Field& u0, double tol,
                              std::size_t max_iter) {
  if (!(tol > 0.0)) throw InvalidArgument("fixed_point_solve: tol must be positive");
  Field cur = u0;
  Field next(it.grid());
  double residual = 0.0;
  for (std::size_t m = 1; m <= max_iter; ++m) {
    it.apply_into(cur, next);
    residual = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      residual = std::max(residual, std::abs(next[i] - cur[i]));
      scale = std::max(scale, std::abs(cur[i]));
    }
    std::swap(cur, next);
    if (!std::isfinite(residual)) {
      throw NonConvergence("fixed_point_solve: iterate became non-finite", m, residual);
    }
    if (residual <= tol * std::max(1.0, scale)) return SolveResult{std::move(cur), m, residual};
  }
  std::ostringstream os;
  os << "fixed_point_solve: no convergence after " << max_iter << " iterations (residual "
     << residual << ")";
  throw NonConvergence(os.str(), max_iter, residual);
}

Field time_step(const PdeProblem& problem, const Field& u_t, std::size_t iters) {
  if (iters == 0) throw InvalidArgument("time_step: iters must be at least 1");
  const SemiImplicitIterator it(problem, u_t);
  Field cur = u_t;
  Field next(problem.grid);
  for (std::size_t m = 0; m < iters; ++m) {
    it.apply_into(cur, next);
    std::swap(cur, next);
  }
  return cur;
}

namespace {

double max_abs(const Field& f) { return norm(f, NormKind::inf); }

}  // namespace

double contraction_bound(const PdeProblem& problem) {
  const auto weights = build_term_weights(problem);
  double bound = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double w = max_abs(weights[i]);
    if (w == 0.0) continue;
    bound += w * off_diag_norm(problem.terms[i].op, problem.grid);
  }
  return bound;
}

double transfer_threshold(const PdeProblem& problem) {
  double sum = 0.0;
  for (const auto& t : problem.terms) sum += off_diag_norm(t.op, problem.grid);
  return sum > 0.0 ? 1.0 / sum : std::numeric_limits<double>::infinity();
}

bool transfer_condition(const PdeProblem& problem) {
  const auto weights = build_term_weights(problem);
  const double threshold = transfer_threshold(problem);
  return std::all_of(weights.begin(), weights.end(),
                     [&](const Field& w) { return max_abs(w) < threshold; });
}

}  // namespace nis
