#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nis/linear_map.hpp"
#include "nis/neural_iterator.hpp"
#include "nis/semi_implicit.hpp"

namespace nis::spectral {

struct SpectralOptions {
  PowerOptions norm{};
  std::size_t radius_iters = 2000;
  std::size_t radius_probes = 4;
  std::uint64_t seed = 0x5eed;
  /// Estimates must clear 1 - margin to count as certified.
  double margin = 1e-3;
};

struct SpectralReport {
  double norm_estimate = 0.0;
  double radius_estimate = 0.0;
  std::size_t norm_iterations = 0;
  std::size_t radius_iterations = 0;
  /// Relative change of the norm estimate over its last 10 iterations.
  double norm_residual = 0.0;
  bool norm_converged = false;
  bool certified = false;
  std::string diagnostic;
};

SpectralReport analyze(const LinearMap& map, const SpectralOptions& options = {});
nlohmann::json to_json(const SpectralReport& report);

/// Validity check of the plain semi-implicit iteration matrix, cheapest test
/// first: transfer condition, then the contraction bound, then a measured
/// spectral radius.
struct BaseCertification {
  bool transfer_condition = false;
  double contraction_bound = 0.0;
  std::optional<double> measured_radius;
  bool certified = false;
  /// Which test settled the outcome: "transfer", "bound" or "measured".
  std::string decided_by;
};

BaseCertification certify_base(const PdeProblem& problem, const SpectralOptions& options = {});
nlohmann::json to_json(const BaseCertification& c);

/// Dense T' = T + G sum_i W_i H_i (T - I) for dense corrections H_i.
DenseMatrix corrected_homogeneous_dense(const SemiImplicitIterator& base,
                                        const std::vector<DenseMatrix>& corrections);

/// Each stack's end-to-end linear map, materialised.
std::vector<DenseMatrix> densify_corrections(const Grid2D& grid,
                                             const std::vector<CorrectionStack>& stacks);

struct ConvexityProbe {
  double lhs = 0.0;  // ||T'(mix)||
  double rhs = 0.0;  // mix ||T'(a)|| + (1 - mix) ||T'(b)||
};

/// Interpolates the composed correction operators (not the layer kernels)
/// and compares the norm of the mixture with the mixture of norms.
ConvexityProbe convexity_probe(const PdeProblem& problem, const std::vector<CorrectionStack>& a,
                               const std::vector<CorrectionStack>& b, double mix,
                               const PowerOptions& options = {});

struct CorrectedNormBound {
  /// sum_i ||W_i|| (||d_i - c_i I - H_i|| + ||H_i||)
  double value = 0.0;
  /// (1 / sum_j ||d_j - c_j I||) sum_i (||d_i - c_i I - H_i|| + ||H_i||),
  /// present only when the transfer condition holds.
  std::optional<double> scaled;
  bool transfer_condition = false;
};

CorrectedNormBound corrected_norm_bound(const PdeProblem& problem,
                                        const std::vector<CorrectionStack>& corrections,
                                        const PowerOptions& options = {});

struct SphereTerm {
  double objective = 0.0;    // ||d_i - c_i I - H_i|| + ||H_i||
  double lower_bound = 0.0;  // ||d_i - c_i I||
  double slack = 0.0;        // objective - lower_bound, >= 0 up to estimation error
};

/// Distance of each correction from the set where the triangle inequality is
/// tight, i.e. the segment/sphere through 0 and d_i - c_i I.
std::vector<SphereTerm> sphere_diagnostic(const PdeProblem& problem,
                                          const std::vector<CorrectionStack>& corrections,
                                          const PowerOptions& options = {});

/// ||d - c I - H|| and ||H|| as matrix-free maps.
LinearMap stencil_minus_correction_map(const Grid2D& grid, const StencilOp& op,
                                       const CorrectionStack& h);
LinearMap correction_map(const Grid2D& grid, const CorrectionStack& h);

}  // namespace nis::spectral
