#include "nis/eval.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <istream>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "nis/error.hpp"

namespace nis::eval {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("percentile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidArgument("percentile rank must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

namespace {

double mse(const Field& a, const Field& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double mean_square(const Field& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return s / static_cast<double>(a.size());
}

Percentiles stats(const std::vector<double>& v) {
  Percentiles p;
  p.p25 = percentile(v, 0.25);
  p.p50 = percentile(v, 0.50);
  p.p75 = percentile(v, 0.75);
  double s = 0.0;
  for (double x : v) s += x;
  p.mean = s / static_cast<double>(v.size());
  return p;
}

struct TrajectoryResult {
  std::vector<EvalRow> rows;
  double neural_seconds = 0.0;
  double semi_seconds = 0.0;
};

TrajectoryResult run_trajectory(const CorrectionModel& model, const data::Dataset& dataset,
                                std::size_t index, const EvalConfig& config) {
  const auto& traj = dataset.trajectories[index];
  const PdeProblem problem = dataset.problem(traj);
  check_compatible(model, problem);
  const std::size_t steps = std::min(config.steps, traj.frames.size() - 1);
  const SemiImplicitIterator base(problem, traj.frames[0]);
  const NeuralIterator neural = NeuralIterator(base, model.corrections).compiled();
  const double scale = mean_square(traj.frames[0]);
  const double norm = scale > 0.0 ? 1.0 / scale : 0.0;

  TrajectoryResult out;
  Field sn = traj.frames[0];
  Field ss = traj.frames[0];
  for (std::size_t n = 1; n <= steps; ++n) {
    auto t0 = Clock::now();
    const NeuralIterator nstep = neural.with_previous_state(sn);
    Field u = sn;
    for (std::size_t m = 0; m < config.neural_iters; ++m) u = nstep.apply(u);
    sn = std::move(u);
    auto t1 = Clock::now();
    const SemiImplicitIterator sstep = base.with_previous_state(ss);
    Field v = ss;
    Field tmp(v.grid());
    for (std::size_t m = 0; m < config.semi_iters; ++m) {
      sstep.apply_into(v, tmp);
      std::swap(v, tmp);
    }
    ss = std::move(v);
    auto t2 = Clock::now();
    out.neural_seconds += std::chrono::duration<double>(t1 - t0).count();
    out.semi_seconds += std::chrono::duration<double>(t2 - t1).count();
    if (!sn.is_finite() || !ss.is_finite())
      throw NumericalFailure("evaluation rollout produced non-finite values");
    EvalRow r;
    r.trajectory = traj.record.index;
    r.step = n;
    r.neural_mse = mse(sn, traj.frames[n]);
    r.semi_mse = mse(ss, traj.frames[n]);
    r.neural_nmse = r.neural_mse * norm;
    r.semi_nmse = r.semi_mse * norm;
    out.rows.push_back(r);
  }
  return out;
}

}  // namespace

EvalReport evaluate(const CorrectionModel& model, const data::Dataset& dataset,
                    std::optional<data::Split> split, const EvalConfig& config) {
  if (config.neural_iters == 0 || config.semi_iters == 0 || config.steps == 0)
    throw InvalidArgument("evaluation budgets and step count must be positive");
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i)
    if (!split || dataset.trajectories[i].record.split == *split) selected.push_back(i);
  if (selected.empty()) throw InvalidArgument("evaluate: no trajectories in the selected split");

  std::vector<TrajectoryResult> results(selected.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < selected.size();) {
      try {
        results[i] = run_trajectory(model, dataset, selected[i], config);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned threads =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, config.threads), selected.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  EvalReport report;
  report.neural_iters = config.neural_iters;
  report.semi_iters = config.semi_iters;
  for (auto& r : results) {
    report.rows.insert(report.rows.end(), r.rows.begin(), r.rows.end());
    report.neural_seconds += r.neural_seconds;
    report.semi_seconds += r.semi_seconds;
  }
  report.steps = summarize(report.rows);
  return report;
}

std::vector<StepSummary> summarize(const std::vector<EvalRow>& rows) {
  std::map<std::size_t, std::array<std::vector<double>, 4>> by_step;
  for (const auto& r : rows) {
    auto& b = by_step[r.step];
    b[0].push_back(r.neural_mse);
    b[1].push_back(r.semi_mse);
    b[2].push_back(r.neural_nmse);
    b[3].push_back(r.semi_nmse);
  }
  std::vector<StepSummary> out;
  for (const auto& [step, b] : by_step)
    out.push_back(StepSummary{step, stats(b[0]), stats(b[1]), stats(b[2]), stats(b[3])});
  return out;
}

void write_csv(const EvalReport& report, std::ostream& os) {
  os << "trajectory,step,neural_mse,semi_mse,neural_nmse,semi_nmse\n";
  os.precision(17);
  for (const auto& r : report.rows)
    os << r.trajectory << ',' << r.step << ',' << r.neural_mse << ',' << r.semi_mse << ','
       << r.neural_nmse << ',' << r.semi_nmse << '\n';
}

std::vector<EvalRow> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("evaluation CSV is empty");
  if (line != "trajectory,step,neural_mse,semi_mse,neural_nmse,semi_nmse")
    throw ParseError("unexpected evaluation CSV header");
  std::vector<EvalRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    EvalRow r;
    char c1, c2, c3, c4, c5;
    if (!(ls >> r.trajectory >> c1 >> r.step >> c2 >> r.neural_mse >> c3 >> r.semi_mse >> c4 >>
          r.neural_nmse >> c5 >> r.semi_nmse) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',')
      throw ParseError("malformed evaluation CSV line " + std::to_string(lineno));
    rows.push_back(r);
  }
  if (rows.empty()) throw ParseError("evaluation CSV has no rows");
  return rows;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const std::vector<StepSummary>& steps, const std::string& title,
                       bool normalized) {
  if (steps.empty()) throw InvalidArgument("render_svg: nothing to plot");
  const double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;
  auto pick = [&](const StepSummary& s, bool neural) -> const Percentiles& {
    if (normalized) return neural ? s.neural_normalized : s.semi_normalized;
    return neural ? s.neural : s.semi;
  };
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& s : steps)
    for (bool n : {true, false}) {
      const auto& p = pick(s, n);
      if (p.p25 > 0.0) lo = std::min(lo, p.p25);
      hi = std::max(hi, p.p75);
    }
  if (!(hi > 0.0)) {
    lo = 1e-16;
    hi = 1.0;
  }
  if (!std::isfinite(lo) || lo >= hi) lo = hi / 10.0;
  const double llo = std::floor(std::log10(lo)), lhi = std::ceil(std::log10(hi));
  const double span = std::max(lhi - llo, 1.0);
  const double smin = static_cast<double>(steps.front().step);
  const double smax = static_cast<double>(steps.back().step);
  auto x_of = [&](double s) {
    return L + (smax > smin ? (s - smin) / (smax - smin) : 0.5) * (W - L - R);
  };
  auto y_of = [&](double v) {
    const double lv = v > 0.0 ? std::log10(v) : llo;
    return T + (1.0 - (std::clamp(lv, llo, llo + span) - llo) / span) * (H - T - B);
  };

  std::ostringstream os;
  os.precision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"15\">"
     << xml_escape(title) << "</text>\n";
  // axes
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (double e = llo; e <= llo + span + 1e-9; e += 1.0) {
    const double y = y_of(std::pow(10.0, e));
    os << "<line x1=\"" << L - 4 << "\" y1=\"" << y << "\" x2=\"" << L << "\" y2=\"" << y
       << "\" stroke=\"black\"/><text x=\"" << L - 8 << "\" y=\"" << y + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1e"
       << static_cast<int>(e) << "</text>\n";
  }
  for (const auto& s : steps) {
    const double x = x_of(static_cast<double>(s.step));
    os << "<text x=\"" << x << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << s.step
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">time step</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
     << (normalized ? "normalized MSE" : "MSE") << "</text>\n";

  struct Series {
    bool neural;
    const char* colour;
    const char* label;
  };
  for (const Series& ser : {Series{true, "#1f77b4", "neural"}, Series{false, "#d62728", "semi-implicit"}}) {
    std::ostringstream band, line;
    for (const auto& s : steps)
      band << x_of(static_cast<double>(s.step)) << ',' << y_of(pick(s, ser.neural).p75) << ' ';
    for (auto it = steps.rbegin(); it != steps.rend(); ++it)
      band << x_of(static_cast<double>(it->step)) << ',' << y_of(pick(*it, ser.neural).p25) << ' ';
    for (const auto& s : steps)
      line << x_of(static_cast<double>(s.step)) << ',' << y_of(pick(s, ser.neural).p50) << ' ';
    os << "<polygon class=\"band\" data-series=\"" << ser.label << "\" points=\"" << band.str()
       << "\" fill=\"" << ser.colour << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n"
       << "<polyline class=\"median\" data-series=\"" << ser.label << "\" points=\"" << line.str()
       << "\" fill=\"none\" stroke=\"" << ser.colour << "\" stroke-width=\"2\"/>\n";
  }
  os << "<g font-family=\"sans-serif\" font-size=\"12\">"
     << "<rect x=\"" << W - R + 15 << "\" y=\"" << T + 5 << "\" width=\"14\" height=\"4\" fill=\"#1f77b4\"/>"
     << "<text x=\"" << W - R + 35 << "\" y=\"" << T + 11 << "\">neural</text>"
     << "<rect x=\"" << W - R + 15 << "\" y=\"" << T + 25 << "\" width=\"14\" height=\"4\" fill=\"#d62728\"/>"
     << "<text x=\"" << W - R + 35 << "\" y=\"" << T + 31 << "\">semi-implicit</text></g>\n";
  os << "</svg>\n";
  return os.str();
}

json to_json(const EvalReport& report) {
  auto pj = [](const Percentiles& p) {
    return json{{"p25", p.p25}, {"p50", p.p50}, {"p75", p.p75}, {"mean", p.mean}};
  };
  json steps = json::array();
  for (const auto& s : report.steps)
    steps.push_back(json{{"step", s.step},
                         {"neural", pj(s.neural)},
                         {"semi", pj(s.semi)},
                         {"neural_normalized", pj(s.neural_normalized)},
                         {"semi_normalized", pj(s.semi_normalized)}});
  return json{{"neural_iters", report.neural_iters},
              {"semi_iters", report.semi_iters},
              {"trajectory_steps", report.rows.size()},
              {"neural_seconds", report.neural_seconds},
              {"semi_seconds", report.semi_seconds},
              {"steps", std::move(steps)}};
}

namespace {

Timing timing(const std::vector<double>& v) {
  return Timing{percentile(v, 0.5), percentile(v, 0.75) - percentile(v, 0.25)};
}

}  // namespace

BenchResult bench(const CorrectionModel& model, const PdeProblem& problem, const Field& u_t,
                  std::size_t reps, std::size_t neural_iters, std::size_t semi_iters) {
  if (reps == 0) throw InvalidArgument("bench: reps must be at least 1");
  if (neural_iters == 0 || semi_iters == 0) throw InvalidArgument("bench: budgets must be positive");
  check_compatible(model, problem);
  const SemiImplicitIterator base(problem, u_t);
  const NeuralIterator neural = NeuralIterator(base, model.corrections).compiled();

  // Each timed region is one full time step: source rebuild plus the iterations.
  auto neural_step = [&] {
    const NeuralIterator it = neural.with_previous_state(u_t);
    Field u = u_t;
    for (std::size_t m = 0; m < neural_iters; ++m) u = it.apply(u);
    return u[u.size() / 2];
  };
  auto semi_step = [&] {
    const SemiImplicitIterator it = base.with_previous_state(u_t);
    Field u = u_t;
    Field tmp(u.grid());
    for (std::size_t m = 0; m < semi_iters; ++m) {
      it.apply_into(u, tmp);
      std::swap(u, tmp);
    }
    return u[u.size() / 2];
  };
  volatile double sink = neural_step() + semi_step();  // warm-up
  std::vector<double> tn, ts;
  for (std::size_t r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    sink = neural_step();
    auto t1 = Clock::now();
    sink = semi_step();
    auto t2 = Clock::now();
    tn.push_back(std::chrono::duration<double>(t1 - t0).count());
    ts.push_back(std::chrono::duration<double>(t2 - t1).count());
  }
  (void)sink;
  BenchResult b;
  b.reps = reps;
  b.neural_iters = neural_iters;
  b.semi_iters = semi_iters;
  b.neural = timing(tn);
  b.semi = timing(ts);
  b.ratio = b.neural.median / b.semi.median;
  return b;
}

json to_json(const BenchResult& b) {
  return json{{"reps", b.reps},
              {"neural_iters", b.neural_iters},
              {"semi_iters", b.semi_iters},
              {"neural", {{"median_s", b.neural.median}, {"iqr_s", b.neural.iqr}}},
              {"semi", {{"median_s", b.semi.median}, {"iqr_s", b.semi.iqr}}},
              {"ratio", b.ratio}};
}

}  // namespace nis::eval
