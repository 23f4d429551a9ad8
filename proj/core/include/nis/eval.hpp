#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nis/datagen.hpp"
#include "nis/neural_iterator.hpp"

namespace nis::eval {

struct EvalConfig {
  std::size_t neural_iters = 10;
  std::size_t semi_iters = 25;
  std::size_t steps = 10;
  unsigned threads = 1;
};

struct EvalRow {
  std::size_t trajectory = 0;
  std::size_t step = 0;  // 1-based time point
  double neural_mse = 0.0;
  double semi_mse = 0.0;
  double neural_nmse = 0.0;  // divided by the initial condition's mean square
  double semi_nmse = 0.0;
};

struct Percentiles {
  double p25 = 0.0;
  double p50 = 0.0;
  double p75 = 0.0;
  double mean = 0.0;
};

struct StepSummary {
  std::size_t step = 0;
  Percentiles neural;
  Percentiles semi;
  Percentiles neural_normalized;
  Percentiles semi_normalized;
};

struct EvalReport {
  std::size_t neural_iters = 0;
  std::size_t semi_iters = 0;
  std::vector<EvalRow> rows;
  std::vector<StepSummary> steps;
  double neural_seconds = 0.0;
  double semi_seconds = 0.0;
};

/// Linear interpolation between closest ranks; q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Rolls every trajectory of `split` (all trajectories if unset) with the
/// corrected update and the plain update, both warm-started from the
/// previous state, and compares each step against the stored frames.
/// Throws GridMismatch/ShapeMismatch for a model with a different stencil set.
EvalReport evaluate(const CorrectionModel& model, const data::Dataset& dataset,
                    std::optional<data::Split> split = data::Split::test,
                    const EvalConfig& config = {});

std::vector<StepSummary> summarize(const std::vector<EvalRow>& rows);

void write_csv(const EvalReport& report, std::ostream& os);
/// Throws ParseError on malformed or empty input.
std::vector<EvalRow> read_csv(std::istream& is);

/// Median curves with p25..p75 bands, log-scaled error axis.
std::string render_svg(const std::vector<StepSummary>& steps, const std::string& title,
                       bool normalized = false);

nlohmann::json to_json(const EvalReport& report);

struct Timing {
  double median = 0.0;
  double iqr = 0.0;
};

struct BenchResult {
  std::size_t reps = 0;
  std::size_t neural_iters = 0;
  std::size_t semi_iters = 0;
  Timing neural;
  Timing semi;
  double ratio = 0.0;  // neural median / semi median
};

/// One time step each way, `reps` times, single thread. reps == 0 throws.
BenchResult bench(const CorrectionModel& model, const PdeProblem& problem, const Field& u_t,
                  std::size_t reps, std::size_t neural_iters = 10, std::size_t semi_iters = 25);

nlohmann::json to_json(const BenchResult& b);

}  // namespace nis::eval
