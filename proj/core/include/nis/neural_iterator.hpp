#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "nis/conv.hpp"
#include "nis/grid.hpp"
#include "nis/linear_map.hpp"
#include "nis/semi_implicit.hpp"

namespace nis {

/// Learned linear correction: a stack of bias-free 3x3 convolutions with no
/// activations, mapping one channel to one channel. Zero maps to zero.
class CorrectionStack {
 public:
  explicit CorrectionStack(std::vector<ConvLayer> layers);

  static CorrectionStack zeros(std::size_t depth, std::size_t width);
  /// Training initialisation: earlier layers U[-0.1, 0.1], final layer zero.
  static CorrectionStack initialized(std::size_t depth, std::size_t width, std::mt19937_64& rng);
  /// Every layer U[-scale, scale].
  static CorrectionStack random(std::size_t depth, std::size_t width, std::mt19937_64& rng,
                                double scale);

  const std::vector<ConvLayer>& layers() const noexcept { return layers_; }
  std::vector<ConvLayer>& layers() noexcept { return layers_; }
  std::size_t depth() const noexcept { return layers_.size(); }
  std::size_t parameter_count() const noexcept;
  bool is_zero() const noexcept;

  Field apply(const Field& f) const;
  /// Layers in reverse order, kernels flipped and channels transposed.
  Field adjoint(const Field& f) const;

  /// Forward pass that keeps the input of every layer for backward().
  Field apply_cached(const Field& f, std::vector<std::vector<double>>& layer_inputs) const;
  /// Accumulates kernel gradients into `grad` and returns d loss / d input.
  Field backward(const std::vector<std::vector<double>>& layer_inputs, const Field& grad_out,
                 CorrectionStack& grad) const;

  /// Same shapes, all weights zero.
  CorrectionStack zeros_like() const;

  bool operator==(const CorrectionStack&) const = default;

 private:
  void check_chain() const;
  std::vector<ConvLayer> layers_;
};

/// One stack per PDE term whose first layer carries the off-diagonal stencil
/// in channel 0 and whose later layers pass channel 0 through unchanged, so
/// that apply() reproduces off_diag_apply() exactly. Requires 3x3 stencils.
std::vector<CorrectionStack> embed_off_diag_stencils(const PdeProblem& problem,
                                                     std::size_t depth = 3,
                                                     std::size_t width = 4);

struct ApplyCounts {
  std::size_t base_passes = 0;        // semi-implicit updates
  std::size_t correction_passes = 0;  // evaluations of the full set of stacks
};

class FusedCorrection;

/// Semi-implicit update plus learned correction:
///   p = Psi(u),  w = p - u,  out = p + G sum_i W_i H_i w.
/// A fixed point of the semi-implicit update is a fixed point here too.
class NeuralIterator {
 public:
  NeuralIterator(SemiImplicitIterator base, std::vector<CorrectionStack> corrections);

  const SemiImplicitIterator& base() const noexcept { return base_; }
  const std::vector<CorrectionStack>& corrections() const noexcept { return *corrections_; }
  const Grid2D& grid() const noexcept { return base_.grid(); }

  NeuralIterator with_previous_state(const Field& u_t) const;

  Field apply(const Field& u, ApplyCounts* counts = nullptr) const;

  /// G sum_i W_i H_i w, and its adjoint.
  Field correction(const Field& w) const;
  Field correction_adjoint(const Field& v) const;

  /// Homogeneous part T' v = T v + G sum_i W_i H_i (T v - v).
  Field homogeneous_apply(const Field& v) const;
  Field homogeneous_adjoint(const Field& v) const;
  spectral::LinearMap homogeneous_map() const;

  /// Inference copy whose corrections are folded into one wide stencil per
  /// boundary class. Same map up to rounding; never used for training.
  NeuralIterator compiled() const;
  bool is_compiled() const noexcept { return static_cast<bool>(fused_); }

 private:
  SemiImplicitIterator base_;
  std::shared_ptr<const std::vector<CorrectionStack>> corrections_;
  std::shared_ptr<const FusedCorrection> fused_;
};

/// Correction stacks tied to the stencil set they were trained for.
struct CorrectionModel {
  std::size_t grid_nx = 0;
  std::size_t grid_ny = 0;
  double grid_dx = 0.0;
  std::vector<StencilOp> stencils;
  std::vector<CorrectionStack> corrections;
};

CorrectionModel make_model(const PdeProblem& problem, std::vector<CorrectionStack> corrections);

/// Structured-text (JSON) model document; kernels round-trip bit-exactly.
std::string serialize_model(const CorrectionModel& model);

/// Parses and checks compatibility with `problem` (term count and stencils;
/// the grid may differ). Throws ParseError or ShapeMismatch.
CorrectionModel deserialize_model(std::string_view text, const PdeProblem& problem);
/// Parses without a compatibility check.
CorrectionModel deserialize_model(std::string_view text);

/// Throws ShapeMismatch unless the model's stencils equal the problem's.
void check_compatible(const CorrectionModel& model, const PdeProblem& problem);

}  // namespace nis
