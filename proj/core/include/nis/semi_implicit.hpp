#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "nis/grid.hpp"
#include "nis/linear_map.hpp"
#include "nis/stencil.hpp"

namespace nis {

/// One term theta_i * d_i / dx^p_i of the spatial operator. The order p_i is
/// taken from the stencil.
struct PdeTerm {
  Field coefficient;  // diagonal of theta_i, one value per node
  StencilOp op;
};

/// A linear PDE instance du/dt = sum_i theta_i d_i u / dx^p_i with Dirichlet
/// values `boundary`, advanced by the eps-weighted semi-implicit scheme.
struct PdeProblem {
  Grid2D grid;
  BoundaryMask mask;
  std::vector<PdeTerm> terms;
  Field boundary;
  double eps = 0.9;  // implicit weight, 0 < eps <= 1
  double dt = 0.2;

  /// Throws InvalidArgument / GridMismatch on a malformed instance.
  void validate() const;
};

struct AdvectionDiffusionCoefficients {
  double vx = 0.0;
  double vy = 0.0;
  double dxx = 0.0;
  double dyy = 0.0;
};

/// u_t = vx u_x + vy u_y + dxx u_xx + dyy u_yy with zero Dirichlet boundary.
/// Terms are ordered dx, dy, dxx, dyy.
PdeProblem make_advection_diffusion(const Grid2D& grid, const AdvectionDiffusionCoefficients& c,
                                    double dt, double eps);

/// 1 / (1 - dt eps sum_j theta_j d_j / dx^p_j), elementwise.
/// Throws SingularPreconditioner when a diagonal entry is below 1e-14 in magnitude.
Field build_inverse_preconditioner(const PdeProblem& problem);

/// Per-term weights dt eps theta_i / dx^p_i scaled by the inverse preconditioner.
std::vector<Field> build_term_weights(const PdeProblem& problem);

/// Constant term of the fixed-point update for the step starting at u_t:
/// P [u_t + dt (1 - eps) sum_i theta_i d_i u_t / dx^p_i].
Field build_source(const PdeProblem& problem, const Field& u_t);

/// The masked fixed-point update u <- G(sum_i W_i (d_i - c_i I) u + s) + (I - G) b
/// for one time step. Immutable; moving to the next time step yields a new
/// iterator sharing the precomputed weights.
class SemiImplicitIterator {
 public:
  SemiImplicitIterator(PdeProblem problem, const Field& u_t);

  /// Same problem, source rebuilt from a new previous state.
  SemiImplicitIterator with_previous_state(const Field& u_t) const;

  const PdeProblem& problem() const noexcept { return shared_->problem; }
  const Grid2D& grid() const noexcept { return shared_->problem.grid; }
  const std::vector<Field>& term_weights() const noexcept { return shared_->weights; }
  const Field& inverse_preconditioner() const noexcept { return shared_->inverse_preconditioner; }
  const Field& source() const noexcept { return source_; }
  std::size_t term_count() const noexcept { return shared_->weights.size(); }

  Field apply(const Field& u) const;
  /// out = apply(u); out must not alias u.
  void apply_into(const Field& u, Field& out) const;

  /// Homogeneous part T: G sum_i W_i (d_i - c_i I) v.
  Field homogeneous_apply(const Field& v) const;
  void homogeneous_apply_into(const Field& v, Field& out) const;
  /// T^T v = sum_i (d_i - c_i I)^T (W_i G v).
  Field homogeneous_adjoint(const Field& v) const;
  spectral::LinearMap homogeneous_map() const;

  /// Adjoint of the source with respect to the previous state: returns
  /// d<g, source(u_t)>/du_t.
  Field source_adjoint(const Field& g) const;

 private:
  struct Tap {
    int dx;
    int dy;
    double w;
  };
  struct Shared {
    PdeProblem problem;
    std::vector<Field> weights;
    Field inverse_preconditioner;
    std::vector<std::vector<Tap>> taps;  // off-diagonal taps per term
  };

  SemiImplicitIterator(std::shared_ptr<const Shared> shared, Field source);
  void accumulate_terms(const Field& u, double* out) const;

  std::shared_ptr<const Shared> shared_;
  Field source_;
};

struct SolveResult {
  Field solution;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Iterates until ||u^{m+1} - u^m||_inf <= tol * max(1, ||u^m||_inf).
/// Throws NonConvergence after max_iter applications.
SolveResult fixed_point_solve(const SemiImplicitIterator& it, const Field& u0, double tol,
                              std::size_t max_iter);

/// One time step with a fixed budget: source from u_t, warm start at u_t,
/// `iters` applications of the update.
Field time_step(const PdeProblem& problem, const Field& u_t, std::size_t iters);

/// sum_i max|W_i| * ||d_i - c_i I||; a value below one certifies rho(T) < 1.
double contraction_bound(const PdeProblem& problem);

/// max|W_i| < 1 / sum_j ||d_j - c_j I|| for every term. When it holds the
/// norm bound of a corrected iterator depends only on the stencils and the
/// corrections, so validity transfers across parameter settings.
bool transfer_condition(const PdeProblem& problem);

/// 1 / sum_j ||d_j - c_j I||.
double transfer_threshold(const PdeProblem& problem);

}  // namespace nis
