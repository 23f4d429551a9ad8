#include <gtest/gtest.h>

#include <random>

#include "dense_oracle.hpp"
#include "nis/error.hpp"
#include "nis/neural_iterator.hpp"
#include <nlohmann/json.hpp>

namespace nis {
namespace {

using testing::max_abs_diff;
using testing::random_field;
using testing::random_problem;
using testing::random_stacks;
using testing::stack_matrix;
using testing::to_vec;

TEST(CorrectionStack, ShapesAreValidated) {
  EXPECT_THROW(CorrectionStack({}), ShapeMismatch);
  EXPECT_THROW(CorrectionStack({ConvLayer(4, 2)}), ShapeMismatch);
  EXPECT_THROW(CorrectionStack({ConvLayer(4, 1), ConvLayer(1, 3)}), ShapeMismatch);
  EXPECT_THROW(CorrectionStack::zeros(0, 4), InvalidArgument);
  const auto s = CorrectionStack::zeros(3, 4);
  EXPECT_EQ(s.parameter_count(), 9u * (4 + 16 + 4));
  EXPECT_TRUE(s.is_zero());
}

TEST(CorrectionStack, ZeroPreservingAndZeroKernels) {
  const Grid2D g(9, 8, 0.1);
  std::mt19937_64 rng(1);
  const auto h = CorrectionStack::random(3, 4, rng, 0.5);
  const Field z = h.apply(Field(g));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(CorrectionStack::zeros(3, 4).apply(random_field(g, rng)), Field(g));
}

TEST(CorrectionStack, InitializationHasZeroFinalLayer) {
  std::mt19937_64 rng(2);
  const auto h = CorrectionStack::initialized(3, 4, rng);
  for (double w : h.layers().back().weights()) EXPECT_EQ(w, 0.0);
  for (double w : h.layers().front().weights()) {
    EXPECT_GE(w, -0.1);
    EXPECT_LE(w, 0.1);
  }
  EXPECT_EQ(h.apply(random_field(Grid2D(6, 6, 0.1), rng)), Field(Grid2D(6, 6, 0.1)));
}

TEST(CorrectionStack, MatchesDenseAndLinear) {
  std::mt19937_64 rng(3);
  const Grid2D g(8, 8, 0.1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto h = CorrectionStack::random(3, 4, rng, 0.4);
    const Field f = random_field(g, rng), q = random_field(g, rng);
    const Eigen::VectorXd expected = stack_matrix(h, g) * to_vec(f);
    EXPECT_LE((expected - to_vec(h.apply(f))).cwiseAbs().maxCoeff(), 1e-13 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
    Field combo = 1.7 * f;
    combo.axpy(-0.3, q);
    Field lin = 1.7 * h.apply(f);
    lin.axpy(-0.3, h.apply(q));
    EXPECT_LE(max_abs_diff(h.apply(combo), lin), 1e-12 * std::max(1.0, norm(lin, NormKind::inf)));
  }
}

TEST(CorrectionStack, AdjointIdentity) {
  std::mt19937_64 rng(4);
  const Grid2D g(6, 6, 0.1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto h = CorrectionStack::random(3, 4, rng, 0.4);
    const Field v = random_field(g, rng), w = random_field(g, rng);
    EXPECT_LE(std::abs(dot(h.apply(v), w) - dot(v, h.adjoint(w))),
              1e-12 * norm(h.apply(v), NormKind::l2) * norm(w, NormKind::l2) + 1e-15);
    const Eigen::MatrixXd m = stack_matrix(h, g);
    const Eigen::VectorXd at = m.transpose() * to_vec(w);
    EXPECT_LE((at - to_vec(h.adjoint(w))).cwiseAbs().maxCoeff(), 1e-13 * std::max(1.0, at.cwiseAbs().maxCoeff()));
  }
  ConvLayer id(1, 1);
  id.at(0, 0, 1, 1) = 1.0;
  const CorrectionStack ident({id, id});
  const Field v = random_field(g, rng);
  EXPECT_EQ(ident.adjoint(v), v);
  EXPECT_EQ(ident.apply(v), v);
}

TEST(Phi, ZeroCorrectionsEqualPsi) {
  std::mt19937_64 rng(5);
  const Grid2D g(10, 9, 0.098);
  const auto p = random_problem(g, rng);
  const SemiImplicitIterator base(p, random_field(g, rng));
  const NeuralIterator phi(base, std::vector<CorrectionStack>(4, CorrectionStack::zeros(3, 4)));
  for (int trial = 0; trial < 5; ++trial) {
    const Field u = random_field(g, rng);
    EXPECT_EQ(phi.apply(u), base.apply(u));
    EXPECT_EQ(phi.compiled().apply(u), base.apply(u));
  }
}

TEST(Phi, PreservesFixedPointOfPsi) {
  std::mt19937_64 rng(6);
  const Grid2D g(16, 16, 0.098);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_problem(g, rng);
    const Field ut = project(p.mask, random_field(g, rng, 0.1), Field(g));
    const SemiImplicitIterator base(p, ut);
    const Field star = fixed_point_solve(base, ut, 1e-13, 1000000).solution;
    const NeuralIterator phi(base, random_stacks(4, rng));
    EXPECT_LE(max_abs_diff(phi.apply(star), star), 1e-9);
  }
}

TEST(Phi, EmbeddedStencilsGiveTwoPsiSteps) {
  std::mt19937_64 rng(7);
  for (const Grid2D g : {Grid2D(8, 8, 0.098), Grid2D(12, 9, 0.2), Grid2D(20, 20, 0.098)}) {
    auto p = random_problem(g, rng);
    p.boundary = project(p.mask, Field(g), random_field(g, rng));
    const SemiImplicitIterator base(p, random_field(g, rng));
    const NeuralIterator phi(base, embed_off_diag_stencils(p));
    for (int trial = 0; trial < 10; ++trial) {
      const Field u = random_field(g, rng);
      const Field two = base.apply(base.apply(u));
      const double tol = 1e-12 * std::max(1.0, norm(two, NormKind::inf));
      EXPECT_LE(max_abs_diff(phi.apply(u), two), tol);
      EXPECT_LE(max_abs_diff(phi.compiled().apply(u), two), tol);
    }
  }
}

TEST(Embedding, ReproducesOffDiagonalStencil) {
  std::mt19937_64 rng(8);
  const Grid2D g(9, 9, 0.1);
  const auto p = random_problem(g, rng);
  const auto hs = embed_off_diag_stencils(p, 3, 4);
  ASSERT_EQ(hs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const Field f = random_field(g, rng);
    EXPECT_LE(max_abs_diff(hs[i].apply(f), off_diag_apply(p.terms[i].op, f)), 1e-13);
  }
  auto zero = p;
  zero.terms[0].op = StencilOp(std::vector<double>(9, 0.0), 1, 1);
  const auto hz = embed_off_diag_stencils(zero);
  EXPECT_EQ(hz[0].apply(random_field(g, rng)), Field(g));
  auto wide = p;
  wide.terms[0].op = StencilOp(std::vector<double>(25, 0.1), 2, 1);
  EXPECT_THROW(embed_off_diag_stencils(wide), InvalidArgument);
}

TEST(HomogeneousMap, MatchesDenseAndAffineDifference) {
  std::mt19937_64 rng(9);
  const Grid2D g(6, 6, 0.098);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_problem(g, rng);
    const SemiImplicitIterator base(p, random_field(g, rng));
    const auto hs = random_stacks(4, rng);
    const NeuralIterator phi(base, hs);
    const Eigen::MatrixXd t = testing::dense_t(p);
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    const auto w = base.term_weights();
    for (std::size_t i = 0; i < 4; ++i) m += to_vec(w[i]).asDiagonal() * stack_matrix(hs[i], g);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!p.mask.interior(i)) m.row(static_cast<Eigen::Index>(i)).setZero();
    const Eigen::MatrixXd tp = t + m * (t - Eigen::MatrixXd::Identity(n, n));
    const Field v = random_field(g, rng);
    const Eigen::VectorXd fwd = tp * to_vec(v), adj = tp.transpose() * to_vec(v);
    EXPECT_LE((fwd - to_vec(phi.homogeneous_apply(v))).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, fwd.cwiseAbs().maxCoeff()));
    EXPECT_LE((adj - to_vec(phi.homogeneous_adjoint(v))).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, adj.cwiseAbs().maxCoeff()));
    const Field u = random_field(g, rng), u2 = random_field(g, rng);
    EXPECT_LE(max_abs_diff(phi.apply(u) - phi.apply(u2), phi.homogeneous_apply(u - u2)), 1e-12);
    EXPECT_EQ(phi.homogeneous_apply(Field(g)), Field(g));
  }
}

TEST(HomogeneousMap, ZeroCorrectionsEqualBase) {
  std::mt19937_64 rng(10);
  const Grid2D g(8, 8, 0.098);
  const SemiImplicitIterator base(random_problem(g, rng), random_field(g, rng));
  const NeuralIterator phi(base, std::vector<CorrectionStack>(4, CorrectionStack::zeros(3, 4)));
  const Field v = random_field(g, rng);
  EXPECT_EQ(phi.homogeneous_apply(v), base.homogeneous_apply(v));
}

TEST(Compiled, MatchesLayeredPath) {
  std::mt19937_64 rng(11);
  for (const Grid2D g : {Grid2D(7, 7, 0.098), Grid2D(13, 11, 0.098), Grid2D(64, 64, 0.098)}) {
    auto p = random_problem(g, rng);
    // spatially varying coefficient exercises per-term kernels
    for (std::size_t i = 0; i < g.size(); ++i) p.terms[1].coefficient[i] *= 1.0 + 0.1 * std::sin(0.3 * i);
    const SemiImplicitIterator base(p, random_field(g, rng));
    const NeuralIterator phi(base, random_stacks(4, rng));
    const NeuralIterator fast = phi.compiled();
    EXPECT_TRUE(fast.is_compiled());
    for (int trial = 0; trial < 3; ++trial) {
      const Field u = random_field(g, rng);
      const Field a = phi.apply(u), b = fast.apply(u);
      EXPECT_LE(max_abs_diff(a, b), 1e-12 * std::max(1.0, norm(a, NormKind::inf)));
    }
  }
  // Too small for the folded kernels: stays on the layered path.
  const Grid2D tiny(5, 5, 0.1);
  const NeuralIterator small(SemiImplicitIterator(random_problem(tiny, rng), Field(tiny)), random_stacks(4, rng));
  EXPECT_FALSE(small.compiled().is_compiled());
}

TEST(Phi, CostAccountingIsOnePsiPlusOneCorrection) {
  std::mt19937_64 rng(12);
  const Grid2D g(8, 8, 0.1);
  const NeuralIterator phi(SemiImplicitIterator(random_problem(g, rng), Field(g)), random_stacks(4, rng));
  ApplyCounts counts;
  Field u = random_field(g, rng);
  for (int m = 0; m < 7; ++m) u = phi.apply(u, &counts);
  EXPECT_EQ(counts.base_passes, 7u);
  EXPECT_EQ(counts.correction_passes, 7u);
}

TEST(Phi, WrongCorrectionCountThrows) {
  const Grid2D g(8, 8, 0.1);
  std::mt19937_64 rng(13);
  EXPECT_THROW(NeuralIterator(SemiImplicitIterator(random_problem(g, rng), Field(g)), random_stacks(3, rng)),
               ShapeMismatch);
}

TEST(Model, RoundTripIsBitExact) {
  std::mt19937_64 rng(14);
  const Grid2D g(16, 16, 0.098);
  const auto p = random_problem(g, rng);
  auto hs = random_stacks(4, rng, 1.0);
  hs[0].layers()[0].at(0, 0, 0, 0) = 0.1;  // not exactly representable
  hs[1].layers()[1].at(2, 3, 1, 2) = -1.0 / 3.0;
  const auto model = make_model(p, hs);
  const std::string text = serialize_model(model);
  const auto back = deserialize_model(text, p);
  ASSERT_EQ(back.corrections.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(back.corrections[i] == hs[i]);
  EXPECT_EQ(back.grid_nx, 16u);
  EXPECT_EQ(serialize_model(back), text);
}

TEST(Model, MalformedPayloads) {
  std::mt19937_64 rng(15);
  const Grid2D g(8, 8, 0.098);
  const auto p = random_problem(g, rng);
  const std::string text = serialize_model(make_model(p, random_stacks(4, rng)));
  EXPECT_THROW(deserialize_model(text.substr(0, text.size() / 2)), ParseError);
  EXPECT_THROW(deserialize_model("{}"), ParseError);
  EXPECT_THROW(deserialize_model(""), ParseError);
  // four-term model against a three-term problem
  auto three = p;
  three.terms.pop_back();
  EXPECT_THROW(deserialize_model(text, three), ShapeMismatch);
  // a different stencil set
  auto other = p;
  other.terms[0].op = other.terms[0].op.scaled(2.0);
  EXPECT_THROW(deserialize_model(text, other), ShapeMismatch);
  // corrupted layer shape
  auto doc = nlohmann::json::parse(text);
  auto& layer = doc.at("corrections").at(0).at("layers").at(0);
  ASSERT_TRUE(layer.contains("out_channels"));
  layer["out_channels"] = layer["out_channels"].get<int>() + 1;
  EXPECT_THROW(deserialize_model(doc.dump()), Error);
}

}  // namespace
}  // namespace nis
