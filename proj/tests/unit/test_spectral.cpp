#include <gtest/gtest.h>

#include <random>

#include "dense_oracle.hpp"
#include "nis/error.hpp"
#include "nis/spectral.hpp"

namespace nis::spectral {
namespace {

using nis::testing::dense_norm;
using nis::testing::dense_radius;
using nis::testing::random_field;
using nis::testing::random_problem;
using nis::testing::random_stacks;
using nis::testing::to_eigen;

LinearMap scalar_map(const Grid2D& g, double a) {
  return LinearMap{g, [a](const Field& v) { return a * v; }, [a](const Field& v) { return a * v; }};
}

TEST(OpNorm, IdentityAndScalar) {
  const Grid2D g(8, 8, 0.1);
  EXPECT_NEAR(op_norm(scalar_map(g, 1.0)).value, 1.0, 1e-10);
  EXPECT_NEAR(op_norm(scalar_map(g, -2.5)).value, 2.5, 1e-10);
  EXPECT_EQ(op_norm(scalar_map(g, 0.0)).value, 0.0);
  EXPECT_THROW(op_norm(LinearMap{g, [](const Field& v) { return v; }, {}}), InvalidArgument);
}

TEST(OpNorm, MatchesDenseSvd) {
  std::mt19937_64 rng(1);
  const Grid2D g(8, 8, 0.098);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_problem(g, rng);
    const SemiImplicitIterator it(p, Field(g));
    const double dense = dense_norm(nis::testing::dense_t(p));
    const auto est = op_norm(it.homogeneous_map());
    EXPECT_TRUE(est.converged);
    EXPECT_NEAR(est.value, dense, 1e-6 * dense);
    const NeuralIterator phi(it, random_stacks(4, rng));
    const double dn = dense_norm(to_eigen(densify(phi.homogeneous_map())));
    EXPECT_NEAR(op_norm(phi.homogeneous_map()).value, dn, 1e-6 * dn);
  }
}

TEST(SpectralRadius, ZeroMaps) {
  const Grid2D g(8, 8, 0.1);
  EXPECT_EQ(spectral_radius(scalar_map(g, 0.0), 100).value, 0.0);
  const SemiImplicitIterator it(make_advection_diffusion(g, {}, 0.2, 0.9), Field(g));
  EXPECT_EQ(spectral_radius(it.homogeneous_map(), 100).value, 0.0);
}

TEST(SpectralRadius, MatchesDenseEigenvalues) {
  std::mt19937_64 rng(2);
  const Grid2D g(8, 8, 0.098);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_problem(g, rng);
    const SemiImplicitIterator it(p, Field(g));
    const double dense = dense_radius(nis::testing::dense_t(p));
    EXPECT_NEAR(spectral_radius(it.homogeneous_map(), 4000).value, dense, 1e-4 * dense);
    const NeuralIterator phi(it, random_stacks(4, rng, 0.2));
    const double dn = dense_radius(to_eigen(densify(phi.homogeneous_map())));
    EXPECT_NEAR(spectral_radius(phi.homogeneous_map(), 4000).value, dn, 1e-4 * dn);
  }
}

TEST(SpectralRadius, OverflowGivesSentinel) {
  const Grid2D g(4, 4, 0.1);
  const auto r = spectral_radius(scalar_map(g, 1e200), 50, 1);
  EXPECT_TRUE(r.overflow || std::isinf(r.value));
  EXPECT_TRUE(std::isinf(r.value));
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(Densify, IdentityTransposeAndGuard) {
  const Grid2D g(5, 4, 0.1);
  const auto id = densify(scalar_map(g, 1.0));
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t c = 0; c < 20; ++c) EXPECT_EQ(id(r, c), r == c ? 1.0 : 0.0);
  std::mt19937_64 rng(3);
  const Grid2D h(6, 6, 0.098);
  const NeuralIterator phi(SemiImplicitIterator(random_problem(h, rng), Field(h)), random_stacks(4, rng));
  const auto fwd = densify(phi.homogeneous_map());
  const auto adj = densify_adjoint(phi.homogeneous_map());
  const auto ft = fwd.transposed();
  for (std::size_t i = 0; i < ft.data().size(); ++i) EXPECT_NEAR(ft.data()[i], adj.data()[i], 1e-15);
  EXPECT_THROW(densify(scalar_map(Grid2D(65, 64, 0.1), 1.0)), InvalidArgument);
}

TEST(Densify, CorrectedMatrixFromParts) {
  std::mt19937_64 rng(4);
  const Grid2D g(6, 6, 0.098);
  const auto p = random_problem(g, rng);
  const SemiImplicitIterator base(p, Field(g));
  const auto hs = random_stacks(4, rng);
  const auto assembled = corrected_homogeneous_dense(base, densify_corrections(g, hs));
  const auto direct = densify(NeuralIterator(base, hs).homogeneous_map());
  for (std::size_t i = 0; i < direct.data().size(); ++i)
    EXPECT_NEAR(assembled.data()[i], direct.data()[i], 1e-13);
}

TEST(Analyze, ReportInvariants) {
  std::mt19937_64 rng(5);
  const Grid2D g(16, 16, 0.098);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_problem(g, rng);
    const auto r = analyze(SemiImplicitIterator(p, Field(g)).homogeneous_map());
    EXPECT_LE(r.radius_estimate, r.norm_estimate + 1e-6);
    EXPECT_EQ(r.certified, r.norm_estimate < 1.0 - 1e-3 || r.radius_estimate < 1.0 - 1e-3);
    const auto j = to_json(r);
    EXPECT_TRUE(j.contains("norm_estimate"));
  }
  const auto zero = analyze(SemiImplicitIterator(make_advection_diffusion(g, {}, 0.2, 0.9), Field(g)).homogeneous_map());
  EXPECT_EQ(zero.norm_estimate, 0.0);
  EXPECT_EQ(zero.radius_estimate, 0.0);
  EXPECT_TRUE(zero.certified);
}

TEST(CertifyBase, DecisionOrder) {
  const Grid2D g(32, 32, 0.098);
  const auto tiny = make_advection_diffusion(g, {0.01, 0.0, 0.001, 0.001}, 0.2, 0.9);
  EXPECT_EQ(certify_base(tiny).decided_by, "transfer");
  const auto paper = make_advection_diffusion(g, {2.0, -2.0, 0.8, 0.8}, 0.2, 0.9);
  const auto c = certify_base(paper);
  EXPECT_EQ(c.decided_by, "measured");
  ASSERT_TRUE(c.measured_radius.has_value());
  EXPECT_TRUE(c.certified);
  EXPECT_GT(c.contraction_bound, 1.0);
}

TEST(Convexity, EndpointsAndEqualSets) {
  std::mt19937_64 rng(6);
  const Grid2D g(6, 6, 0.098);
  const auto p = random_problem(g, rng);
  const auto a = random_stacks(4, rng), b = random_stacks(4, rng);
  const auto same = convexity_probe(p, a, a, 0.37);
  EXPECT_NEAR(same.lhs, same.rhs, 1e-10 * same.rhs);
  for (double mix : {0.0, 1.0}) {
    const auto e = convexity_probe(p, a, b, mix);
    EXPECT_EQ(e.lhs, e.rhs);
  }
  EXPECT_THROW(convexity_probe(p, a, b, 1.5), InvalidArgument);
  EXPECT_THROW(convexity_probe(p, a, random_stacks(4, rng, 0.3, 2, 4), 0.5), ShapeMismatch);
}

TEST(Convexity, RandomProbes) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Grid2D g(8, 8, 0.098);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(g, rng);
    const auto pr = convexity_probe(p, random_stacks(4, rng), random_stacks(4, rng), u(rng));
    EXPECT_LE(pr.lhs, pr.rhs + 1e-6);
  }
}

TEST(CorrectedNormBound, ZeroCorrectionsReduceToContractionBound) {
  std::mt19937_64 rng(8);
  for (const Grid2D g : {Grid2D(8, 8, 0.098), Grid2D(16, 12, 0.3)}) {
    const auto p = random_problem(g, rng);
    const auto b = corrected_norm_bound(p, std::vector<CorrectionStack>(4, CorrectionStack::zeros(3, 4)));
    EXPECT_NEAR(b.value, contraction_bound(p), 1e-10);
  }
}

TEST(CorrectedNormBound, DominatesNormAndVanishesForEmbedding) {
  std::mt19937_64 rng(9);
  const Grid2D g(8, 8, 0.098);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_problem(g, rng);
    const auto hs = random_stacks(4, rng, 0.2);
    const NeuralIterator phi(SemiImplicitIterator(p, Field(g)), hs);
    EXPECT_GE(corrected_norm_bound(p, hs).value, op_norm(phi.homogeneous_map()).value - 1e-6);
  }
  const auto p = random_problem(g, rng);
  const auto emb = embed_off_diag_stencils(p);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_LE(op_norm(stencil_minus_correction_map(g, p.terms[i].op, emb[i])).value, 1e-14);
}

TEST(CorrectedNormBound, ScaledFormWhenTransferHolds) {
  const Grid2D g(8, 8, 0.098);
  const auto p = make_advection_diffusion(g, {0.01, 0.01, 0.001, 0.001}, 0.2, 0.9);
  ASSERT_TRUE(transfer_condition(p));
  std::mt19937_64 rng(10);
  const auto b = corrected_norm_bound(p, random_stacks(4, rng, 0.1));
  ASSERT_TRUE(b.scaled.has_value());
  EXPECT_GE(*b.scaled, b.value);
  const auto loose = make_advection_diffusion(g, {2.0, 2.0, 0.8, 0.8}, 0.2, 0.9);
  EXPECT_FALSE(corrected_norm_bound(loose, random_stacks(4, rng, 0.1)).scaled.has_value());
}

TEST(Sphere, SlackZeroAtSpecialPoints) {
  std::mt19937_64 rng(11);
  const Grid2D g(8, 8, 0.098);
  const auto p = random_problem(g, rng);
  auto check_zero = [&](const std::vector<CorrectionStack>& hs) {
    for (const auto& t : sphere_diagnostic(p, hs)) EXPECT_NEAR(t.slack, 0.0, 1e-8);
  };
  check_zero(std::vector<CorrectionStack>(4, CorrectionStack::zeros(3, 4)));
  auto emb = embed_off_diag_stencils(p);
  check_zero(emb);
  for (auto& h : emb)
    for (double& w : h.layers()[0].weights()) w *= 0.5;
  check_zero(emb);
  for (int trial = 0; trial < 10; ++trial)
    for (const auto& t : sphere_diagnostic(p, random_stacks(4, rng))) EXPECT_GE(t.slack, -1e-8);
}

}  // namespace
}  // namespace nis::spectral
