#include <benchmark/benchmark.h>

#include <random>

#include "nis/datagen.hpp"
#include "nis/neural_iterator.hpp"
#include "nis/spectral.hpp"

namespace {

struct Setup {
  nis::PdeProblem problem;
  nis::Field u0;
  std::vector<nis::CorrectionStack> stacks;

  explicit Setup(std::size_t n) : problem(make(n)), u0(problem.grid) {
    std::mt19937_64 rng(1);
    const auto p = nis::data::sample_params(rng);
    problem = nis::data::make_problem(problem.grid, p, 0.2, 0.9);
    u0 = nis::data::init_condition(problem.grid, p);
    for (std::size_t i = 0; i < problem.terms.size(); ++i)
      stacks.push_back(nis::CorrectionStack::random(3, 4, rng, 0.1));
  }
  static nis::PdeProblem make(std::size_t n) {
    const nis::Grid2D g(n, n, 2.0 * 3.141592653589793 / static_cast<double>(n));
    return nis::make_advection_diffusion(g, {}, 0.2, 0.9);
  }
};

void BM_SemiImplicitApply(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  const nis::SemiImplicitIterator it(s.problem, s.u0);
  nis::Field u = s.u0, out(s.u0.grid());
  for (auto _ : state) {
    it.apply_into(u, out);
    std::swap(u, out);
    benchmark::DoNotOptimize(u.values().data());
  }
}
BENCHMARK(BM_SemiImplicitApply)->Arg(64)->Arg(128);

void BM_NeuralApplyLayered(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  const nis::NeuralIterator it(nis::SemiImplicitIterator(s.problem, s.u0), s.stacks);
  nis::Field u = s.u0;
  for (auto _ : state) {
    u = it.apply(u);
    benchmark::DoNotOptimize(u.values().data());
  }
}
BENCHMARK(BM_NeuralApplyLayered)->Arg(64)->Arg(128);

void BM_NeuralApplyCompiled(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  const auto it = nis::NeuralIterator(nis::SemiImplicitIterator(s.problem, s.u0), s.stacks).compiled();
  nis::Field u = s.u0;
  for (auto _ : state) {
    u = it.apply(u);
    benchmark::DoNotOptimize(u.values().data());
  }
}
BENCHMARK(BM_NeuralApplyCompiled)->Arg(64)->Arg(128);

void BM_CorrectionStackApply(benchmark::State& state) {
  const Setup s(64);
  nis::Field u = s.u0;
  for (auto _ : state) {
    auto out = s.stacks[0].apply(u);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_CorrectionStackApply);

// One time step each way at the comparison budgets (10 corrected, 25 plain).
void BM_NeuralStep10(benchmark::State& state) {
  const Setup s(64);
  const auto it = nis::NeuralIterator(nis::SemiImplicitIterator(s.problem, s.u0), s.stacks).compiled();
  for (auto _ : state) {
    const auto step = it.with_previous_state(s.u0);
    nis::Field u = s.u0;
    for (int k = 0; k < 10; ++k) u = step.apply(u);
    benchmark::DoNotOptimize(u.values().data());
  }
}
BENCHMARK(BM_NeuralStep10);

void BM_SemiImplicitStep25(benchmark::State& state) {
  const Setup s(64);
  const nis::SemiImplicitIterator base(s.problem, s.u0);
  for (auto _ : state) {
    const auto step = base.with_previous_state(s.u0);
    nis::Field u = s.u0, out(s.u0.grid());
    for (int k = 0; k < 25; ++k) {
      step.apply_into(u, out);
      std::swap(u, out);
    }
    benchmark::DoNotOptimize(u.values().data());
  }
}
BENCHMARK(BM_SemiImplicitStep25);

void BM_IterationNorm(benchmark::State& state) {
  const Setup s(32);
  const nis::SemiImplicitIterator it(s.problem, s.u0);
  for (auto _ : state) benchmark::DoNotOptimize(nis::spectral::op_norm(it.homogeneous_map()).value);
}
BENCHMARK(BM_IterationNorm)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
