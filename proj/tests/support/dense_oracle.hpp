// Dense reference implementations used only by tests. They are built from
// the problem description directly, not from the matrix-free code paths.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "nis/grid.hpp"
#include "nis/linear_map.hpp"
#include "nis/neural_iterator.hpp"
#include "nis/semi_implicit.hpp"
#include "nis/stencil.hpp"

namespace nis::testing {

inline Eigen::VectorXd to_vec(const Field& f) {
  return Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
}

inline Field to_field(const Grid2D& g, const Eigen::VectorXd& v) {
  return Field(g, std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::MatrixXd to_eigen(const spectral::DenseMatrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
  return out;
}

/// Zero-padded cross-correlation matrix of a stencil.
inline Eigen::MatrixXd stencil_matrix(const StencilOp& op, const Grid2D& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n, n);
  const int r = static_cast<int>(op.radius());
  for (std::size_t iy = 0; iy < g.ny(); ++iy)
    for (std::size_t ix = 0; ix < g.nx(); ++ix)
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const long jx = static_cast<long>(ix) + dx, jy = static_cast<long>(iy) + dy;
          if (jx < 0 || jy < 0 || jx >= static_cast<long>(g.nx()) || jy >= static_cast<long>(g.ny()))
            continue;
          k(static_cast<Eigen::Index>(g.index(ix, iy)),
            static_cast<Eigen::Index>(g.index(static_cast<std::size_t>(jx), static_cast<std::size_t>(jy)))) +=
              op.weight(dx, dy);
        }
  return k;
}

/// Multi-channel 3x3 conv stack as one dense matrix (product of layer blocks).
inline Eigen::MatrixXd stack_matrix(const CorrectionStack& h, const Grid2D& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(n, n);
  for (const auto& layer : h.layers()) {
    const auto in = static_cast<Eigen::Index>(layer.in_channels());
    const auto out = static_cast<Eigen::Index>(layer.out_channels());
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(out * n, in * n);
    for (Eigen::Index o = 0; o < out; ++o)
      for (Eigen::Index i = 0; i < in; ++i) {
        std::vector<double> kernel(9);
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx)
            kernel[ky * 3 + kx] = layer.at(static_cast<std::size_t>(o), static_cast<std::size_t>(i), ky, kx);
        block.block(o * n, i * n, n, n) = stencil_matrix(StencilOp(kernel, 1, 1), g);
      }
    acc = (block * acc).eval();
  }
  return acc;
}

struct DenseSystem {
  Eigen::MatrixXd a;
  Eigen::VectorXd rhs;
};

/// (I - dt eps sum theta_i D_i / h^p) u = u_t + dt (1 - eps) sum theta_i D_i u_t / h^p on
/// interior rows, u = b on boundary rows.
inline DenseSystem implicit_system(const PdeProblem& p, const Field& u_t) {
  const auto n = static_cast<Eigen::Index>(p.grid.size());
  Eigen::MatrixXd implicit = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd explicit_part = Eigen::MatrixXd::Zero(n, n);
  for (const auto& t : p.terms) {
    const Eigen::MatrixXd d = stencil_matrix(t.op, p.grid);
    const double h = std::pow(p.grid.dx(), t.op.order());
    const Eigen::VectorXd theta = to_vec(t.coefficient);
    implicit += (p.dt * p.eps / h) * (theta.asDiagonal() * d);
    explicit_part += (p.dt * (1.0 - p.eps) / h) * (theta.asDiagonal() * d);
  }
  DenseSystem s;
  s.a = Eigen::MatrixXd::Identity(n, n) - implicit;
  const Eigen::VectorXd ut = to_vec(u_t);
  s.rhs = ut + explicit_part * ut;
  const auto mask = p.mask.values();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!mask[static_cast<std::size_t>(i)]) {
      s.a.row(i).setZero();
      s.a(i, i) = 1.0;
      s.rhs(i) = p.boundary[static_cast<std::size_t>(i)];
    }
  return s;
}

inline Field dense_step(const PdeProblem& p, const Field& u_t) {
  const auto s = implicit_system(p, u_t);
  return to_field(p.grid, s.a.partialPivLu().solve(s.rhs));
}

/// Dense T: G sum_i Lambda_i (D_i - d_i I).
inline Eigen::MatrixXd dense_t(const PdeProblem& p) {
  const auto n = static_cast<Eigen::Index>(p.grid.size());
  Eigen::VectorXd diag = Eigen::VectorXd::Ones(n);
  for (const auto& t : p.terms) {
    const double h = std::pow(p.grid.dx(), t.op.order());
    diag -= (p.dt * p.eps * t.op.central() / h) * to_vec(t.coefficient);
  }
  Eigen::MatrixXd tm = Eigen::MatrixXd::Zero(n, n);
  for (const auto& t : p.terms) {
    const double h = std::pow(p.grid.dx(), t.op.order());
    const Eigen::VectorXd lam =
        (p.dt * p.eps / h) * to_vec(t.coefficient).cwiseQuotient(diag);
    tm += lam.asDiagonal() * stencil_matrix(t.op.off_diagonal(), p.grid);
  }
  const auto mask = p.mask.values();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!mask[static_cast<std::size_t>(i)]) tm.row(i).setZero();
  return tm;
}

inline double dense_norm(const Eigen::MatrixXd& m) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

inline double dense_radius(const Eigen::MatrixXd& m) {
  return Eigen::EigenSolver<Eigen::MatrixXd>(m, false).eigenvalues().cwiseAbs().maxCoeff();
}

inline Field random_field(const Grid2D& g, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Field f(g);
  for (double& v : f.values()) v = d(rng);
  return f;
}

/// Random advection-diffusion instance drawn from the training ranges.
inline PdeProblem random_problem(const Grid2D& g, std::mt19937_64& rng, double dt = 0.2,
                                 double eps = 0.9) {
  std::uniform_real_distribution<double> v(-2.0, 2.0), d(0.2, 0.8);
  const double vx = v(rng), vy = v(rng), dxx = d(rng), dyy = d(rng);
  return make_advection_diffusion(g, {vx, vy, dxx, dyy}, dt, eps);
}

inline std::vector<CorrectionStack> random_stacks(std::size_t n, std::mt19937_64& rng,
                                                  double scale = 0.3, std::size_t depth = 3,
                                                  std::size_t width = 4) {
  std::vector<CorrectionStack> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(CorrectionStack::random(depth, width, rng, scale));
  return out;
}

inline double max_abs_diff(const Field& a, const Field& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace nis::testing
