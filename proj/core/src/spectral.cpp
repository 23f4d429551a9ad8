#include "nis/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nis/error.hpp"

namespace nis::spectral {

SpectralReport analyze(const LinearMap& map, const SpectralOptions& options) {
  SpectralReport r;
  const auto n = op_norm(map, options.norm);
  r.norm_estimate = n.value;
  r.norm_iterations = n.iterations;
  r.norm_residual = n.rel_change;
  r.norm_converged = n.converged;
  const auto rho =
      spectral_radius(map, options.radius_iters, options.radius_probes, options.seed);
  r.radius_estimate = rho.value;
  r.radius_iterations = rho.iterations;
  r.diagnostic = rho.diagnostic;
  if (!n.converged) {
    if (!r.diagnostic.empty()) r.diagnostic += "; ";
    r.diagnostic += "norm iteration stopped before converging";
  }
  const double limit = 1.0 - options.margin;
  r.certified = r.norm_estimate < limit || r.radius_estimate < limit;
  return r;
}

nlohmann::json to_json(const SpectralReport& r) {
  return nlohmann::json{{"norm_estimate", r.norm_estimate},
                        {"radius_estimate", r.radius_estimate},
                        {"norm_iterations", r.norm_iterations},
                        {"radius_iterations", r.radius_iterations},
                        {"norm_residual", r.norm_residual},
                        {"norm_converged", r.norm_converged},
                        {"certified", r.certified},
                        {"diagnostic", r.diagnostic}};
}

BaseCertification certify_base(const PdeProblem& problem, const SpectralOptions& options) {
  BaseCertification c;
  c.contraction_bound = contraction_bound(problem);
  c.transfer_condition = transfer_condition(problem);
  if (c.transfer_condition) {
    c.certified = true;
    c.decided_by = "transfer";
    return c;
  }
  if (c.contraction_bound < 1.0) {
    c.certified = true;
    c.decided_by = "bound";
    return c;
  }
  const SemiImplicitIterator it(problem, problem.boundary);
  const auto rho = spectral_radius(it.homogeneous_map(), options.radius_iters,
                                   options.radius_probes, options.seed);
  c.measured_radius = rho.value;
  c.certified = rho.value < 1.0 - options.margin;
  c.decided_by = "measured";
  return c;
}

nlohmann::json to_json(const BaseCertification& c) {
  nlohmann::json j{{"transfer_condition", c.transfer_condition},
                   {"contraction_bound", c.contraction_bound},
                   {"certified", c.certified},
                   {"decided_by", c.decided_by}};
  j["measured_radius"] = c.measured_radius ? nlohmann::json(*c.measured_radius) : nlohmann::json();
  return j;
}

std::vector<DenseMatrix> densify_corrections(const Grid2D& grid,
                                             const std::vector<CorrectionStack>& stacks) {
  std::vector<DenseMatrix> out;
  out.reserve(stacks.size());
  for (const auto& s : stacks) out.push_back(densify(correction_map(grid, s)));
  return out;
}

DenseMatrix corrected_homogeneous_dense(const SemiImplicitIterator& base,
                                        const std::vector<DenseMatrix>& corrections) {
  if (corrections.size() != base.term_count())
    throw ShapeMismatch("corrected_homogeneous_dense: correction count != term count");
  const DenseMatrix t = densify(base.homogeneous_map());
  const std::size_t n = t.rows();
  DenseMatrix m(n, n);
  const auto mask = base.problem().mask.values();
  for (std::size_t i = 0; i < corrections.size(); ++i) {
    std::vector<double> d(n);
    for (std::size_t k = 0; k < n; ++k) d[k] = mask[k] ? base.term_weights()[i][k] : 0.0;
    DenseMatrix scaled = corrections[i];
    scaled.scale_rows(d);
    m += scaled;
  }
  return t + m * (t - DenseMatrix::identity(n));
}

ConvexityProbe convexity_probe(const PdeProblem& problem, const std::vector<CorrectionStack>& a,
                               const std::vector<CorrectionStack>& b, double mix,
                               const PowerOptions& options) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw InvalidArgument("convexity_probe: mix must lie in [0,1]");
  if (a.size() != b.size() || a.size() != problem.terms.size())
    throw ShapeMismatch("convexity_probe: correction sets differ in size");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].layers().size() != b[i].layers().size())
      throw ShapeMismatch("convexity_probe: correction depths differ");
    for (std::size_t l = 0; l < a[i].layers().size(); ++l)
      if (a[i].layers()[l].out_channels() != b[i].layers()[l].out_channels() ||
          a[i].layers()[l].in_channels() != b[i].layers()[l].in_channels())
        throw ShapeMismatch("convexity_probe: layer shapes differ");
  }
  const SemiImplicitIterator base(problem, problem.boundary);
  const auto ha = densify_corrections(problem.grid, a);
  const auto hb = densify_corrections(problem.grid, b);
  std::vector<DenseMatrix> hm;
  for (std::size_t i = 0; i < ha.size(); ++i) hm.push_back(mix * ha[i] + (1.0 - mix) * hb[i]);

  auto norm_of = [&](const std::vector<DenseMatrix>& h) {
    return op_norm(dense_map(problem.grid, corrected_homogeneous_dense(base, h)), options).value;
  };
  ConvexityProbe p;
  const double na = norm_of(ha);
  const double nb = (mix == 1.0 || &a == &b) ? na : norm_of(hb);
  p.rhs = mix * na + (1.0 - mix) * nb;
  if (mix == 1.0)
    p.lhs = na;
  else if (mix == 0.0)
    p.lhs = nb;
  else
    p.lhs = norm_of(hm);
  return p;
}

LinearMap correction_map(const Grid2D& grid, const CorrectionStack& h) {
  return LinearMap{grid, [h](const Field& v) { return h.apply(v); },
                   [h](const Field& v) { return h.adjoint(v); }};
}

LinearMap stencil_minus_correction_map(const Grid2D& grid, const StencilOp& op,
                                       const CorrectionStack& h) {
  const StencilOp off = op.off_diagonal();
  const StencilOp adj = off.flipped();
  return LinearMap{grid,
                   [off, h](const Field& v) {
                     Field out = apply(off, v);
                     out -= h.apply(v);
                     return out;
                   },
                   [adj, h](const Field& v) {
                     Field out = apply(adj, v);
                     out -= h.adjoint(v);
                     return out;
                   }};
}

namespace {

double norm_value(const LinearMap& m, const PowerOptions& options) {
  return op_norm(m, options).value;
}

}  // namespace

std::vector<SphereTerm> sphere_diagnostic(const PdeProblem& problem,
                                          const std::vector<CorrectionStack>& corrections,
                                          const PowerOptions& options) {
  if (corrections.size() != problem.terms.size())
    throw ShapeMismatch("sphere_diagnostic: correction count != term count");
  std::vector<SphereTerm> out;
  for (std::size_t i = 0; i < corrections.size(); ++i) {
    const auto& op = problem.terms[i].op;
    SphereTerm t;
    t.objective = norm_value(stencil_minus_correction_map(problem.grid, op, corrections[i]), options) +
                  norm_value(correction_map(problem.grid, corrections[i]), options);
    t.lower_bound = off_diag_norm(op, problem.grid);
    t.slack = t.objective - t.lower_bound;
    out.push_back(t);
  }
  return out;
}

CorrectedNormBound corrected_norm_bound(const PdeProblem& problem,
                                        const std::vector<CorrectionStack>& corrections,
                                        const PowerOptions& options) {
  if (corrections.size() != problem.terms.size())
    throw ShapeMismatch("corrected_norm_bound: correction count != term count");
  const auto weights = build_term_weights(problem);
  CorrectedNormBound b;
  double unscaled_sum = 0.0;
  for (std::size_t i = 0; i < corrections.size(); ++i) {
    const auto& op = problem.terms[i].op;
    const double diff = norm_value(
        stencil_minus_correction_map(problem.grid, op, corrections[i]), options);
    const double hn = norm_value(correction_map(problem.grid, corrections[i]), options);
    unscaled_sum += diff + hn;
    b.value += norm(weights[i], NormKind::inf) * (diff + hn);
  }
  b.transfer_condition = transfer_condition(problem);
  if (b.transfer_condition) b.scaled = transfer_threshold(problem) * unscaled_sum;
  return b;
}

}  // namespace nis::spectral
