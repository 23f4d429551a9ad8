// nis: dataset generation, training, evaluation, spectral checks, timing and plots.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "nis/datagen.hpp"
#include "nis/error.hpp"
#include "nis/eval.hpp"
#include "nis/neural_iterator.hpp"
#include "nis/spectral.hpp"
#include "nis/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitCertification = 3;
constexpr int kSchemaVersion = 1;

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw nis::ParseError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw nis::Error("cannot write " + p.string());
    os << text;
    if (!os) throw nis::Error("write failed: " + p.string());
  }
  fs::rename(tmp, p);
}

/// Parses a JSON object config; rejects unknown keys and foreign schema versions.
json load_config(const std::string& path, const std::set<std::string>& allowed) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw nis::ParseError(path + ": " + e.what());
  }
  if (!j.is_object()) throw nis::ParseError(path + ": config must be a JSON object");
  if (j.contains("schema_version")) {
    if (j["schema_version"] != kSchemaVersion)
      throw nis::ParseError(path + ": unsupported schema_version " + j["schema_version"].dump());
    j.erase("schema_version");
  }
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw nis::ParseError(path + ": unknown key '" + key + "'");
  return j;
}

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw nis::ParseError(std::string("config key '") + key + "': " + e.what());
  }
}

void emit(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty())
    std::cout << text;
  else
    write_text_atomic(out, text);
}

// ---------------------------------------------------------------- datagen

struct DatagenArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trajectories;
  std::optional<std::size_t> steps;
  std::optional<unsigned> threads;
  bool variants = false;
};

int cmd_datagen(const DatagenArgs& a) {
  const json j = load_config(a.config, {"name", "nx", "ny", "dx", "dt", "eps", "trajectories",
                                        "steps", "base_seed", "oracle_tol", "oracle_max_iter",
                                        "train_fraction", "val_fraction", "amp_spread",
                                        "spread_reading", "threads", "variants",
                                        "variant_trajectories", "variant_steps"});
  nis::data::GenerateConfig c;
  take(j, "name", c.name);
  take(j, "nx", c.nx);
  take(j, "ny", c.ny);
  if (j.contains("nx") && !j.contains("ny")) c.ny = c.nx;
  take(j, "dx", c.dx);
  take(j, "dt", c.dt);
  take(j, "eps", c.eps);
  take(j, "trajectories", c.trajectories);
  take(j, "steps", c.steps);
  take(j, "base_seed", c.base_seed);
  take(j, "oracle_tol", c.oracle_tol);
  take(j, "oracle_max_iter", c.oracle_max_iter);
  take(j, "train_fraction", c.train_fraction);
  take(j, "val_fraction", c.val_fraction);
  take(j, "amp_spread", c.sampling.amp_spread);
  take(j, "threads", c.threads);
  if (j.contains("spread_reading")) {
    const auto r = j["spread_reading"].get<std::string>();
    if (r == "variance")
      c.sampling.spread_reading = nis::data::SpreadReading::variance;
    else if (r == "stddev")
      c.sampling.spread_reading = nis::data::SpreadReading::stddev;
    else
      throw nis::ParseError("spread_reading must be 'variance' or 'stddev'");
  }
  bool variants = a.variants;
  std::size_t vt = 20, vs = 10;
  take(j, "variants", variants);
  take(j, "variant_trajectories", vt);
  take(j, "variant_steps", vs);
  if (a.seed) c.base_seed = *a.seed;
  if (a.trajectories) c.trajectories = *a.trajectories;
  if (a.steps) c.steps = *a.steps;
  if (a.threads) c.threads = *a.threads;
  c.validate();

  const fs::path out = a.out;
  const auto m = nis::data::generate(c, variants ? out / c.name : out);
  json summary{{"dataset", (variants ? out / c.name : out).string()},
               {"trajectories", m.trajectories.size()}};
  if (variants) {
    json vj = json::array();
    for (const auto& vm : nis::data::variant_testsets(c, out, vt, vs))
      vj.push_back({{"name", vm.name}, {"trajectories", vm.trajectories.size()},
                    {"nx", vm.nx}, {"dx", vm.dx}, {"dt", vm.dt}, {"eps", vm.eps}});
    summary["variants"] = vj;
  }
  std::cout << summary.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<unsigned> threads;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  json j = load_config(a.config, {"lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs",
                                  "k_min", "k_max", "horizon", "window_stride", "val_k",
                                  "validate_every", "depth", "width", "seed",
                                  "radius_check_iters", "threads"});
  if (a.seed) j["seed"] = *a.seed;
  if (a.epochs) j["epochs"] = *a.epochs;
  if (a.threads) j["threads"] = *a.threads;
  const auto config = nis::train::train_config_from_json(j);
  const auto dataset = nis::data::load_dataset(a.data);

  const fs::path out = a.out;
  fs::create_directories(out);
  const fs::path checkpoint = out / "checkpoint.json";
  const fs::path log_path = out / "train_log.jsonl";

  std::optional<nis::train::TrainState> resume;
  if (a.resume) {
    if (!fs::exists(checkpoint)) throw nis::InvalidArgument("--resume: no checkpoint in " + out.string());
    resume = nis::train::deserialize_state(read_text(checkpoint));
  }
  {
    // the log always mirrors the checkpointed history
    std::ofstream log(log_path, std::ios::trunc);
    if (resume)
      for (const auto& r : resume->log) log << nis::train::to_json(r).dump() << "\n";
  }
  auto on_epoch = [&](const nis::train::EpochRecord& r, const nis::train::TrainState& s) {
    std::ofstream log(log_path, std::ios::app);
    log << nis::train::to_json(r).dump() << "\n";
    write_text_atomic(checkpoint, nis::train::serialize_state(s));
    std::cerr << "epoch " << r.epoch << " train " << r.train_loss;
    if (r.val_loss) std::cerr << " val " << *r.val_loss;
    if (r.radius) std::cerr << " radius " << *r.radius;
    std::cerr << "\n";
  };
  const auto result = nis::train::train(dataset, config, std::move(resume), on_epoch);
  write_text_atomic(out / "model.json", nis::serialize_model(result.model));
  std::cout << json{{"model", (out / "model.json").string()},
                    {"best_epoch", result.state.best_epoch},
                    {"best_val_loss", result.state.best_val},
                    {"epochs_done", result.state.epochs_done}}
                   .dump()
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string config;
  std::string model;
  std::string data;
  std::string out;
  std::string csv;
  std::string svg;
  std::string split = "test";
  std::optional<std::size_t> neural_iters;
  std::optional<std::size_t> semi_iters;
  std::optional<std::size_t> steps;
  std::optional<unsigned> threads;
  bool normalized = false;
};

std::optional<nis::data::Split> parse_split(const std::string& s) {
  if (s == "all") return std::nullopt;
  return nis::data::split_from_string(s);
}

int cmd_eval(const EvalArgs& a) {
  const json j = load_config(a.config, {"neural_iters", "semi_iters", "steps", "threads", "split"});
  nis::eval::EvalConfig c;
  std::string split = a.split;
  take(j, "neural_iters", c.neural_iters);
  take(j, "semi_iters", c.semi_iters);
  take(j, "steps", c.steps);
  take(j, "threads", c.threads);
  take(j, "split", split);
  if (a.neural_iters) c.neural_iters = *a.neural_iters;
  if (a.semi_iters) c.semi_iters = *a.semi_iters;
  if (a.steps) c.steps = *a.steps;
  if (a.threads) c.threads = *a.threads;

  const auto model = nis::deserialize_model(read_text(a.model));
  const auto dataset = nis::data::load_dataset(a.data);
  nis::eval::EvalReport report;
  try {
    report = nis::eval::evaluate(model, dataset, parse_split(split), c);
  } catch (const nis::ShapeMismatch& e) {
    throw nis::ShapeMismatch(std::string(e.what()) +
                             " (a model transfers only to problems with the same stencil set "
                             "and term count)");
  }
  if (!a.csv.empty()) {
    std::ostringstream os;
    nis::eval::write_csv(report, os);
    write_text_atomic(a.csv, os.str());
  }
  if (!a.svg.empty())
    write_text_atomic(a.svg, nis::eval::render_svg(report.steps, dataset.manifest.name, a.normalized));
  emit(nis::eval::to_json(report), a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- problem selection

struct ProblemArgs {
  std::string data;
  std::size_t trajectory = 0;
  bool all = false;
  std::size_t n = 64;
  double dx = 0.0;  // 0 = 2 pi / n
  double dt = 0.2;
  double eps = 0.9;
  std::optional<double> vx, vy, dxx, dyy;
  std::uint64_t seed = 0;
};

struct Instance {
  std::string label;
  nis::PdeProblem problem;
  nis::Field state;
};

std::vector<Instance> select_problems(const ProblemArgs& a) {
  std::vector<Instance> out;
  if (!a.data.empty()) {
    const auto ds = nis::data::load_dataset(a.data);
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
      if (!a.all && i != a.trajectory) continue;
      const auto& t = ds.trajectories[i];
      out.push_back({ds.manifest.name + "/" + t.record.file, ds.problem(t), t.frames.front()});
    }
    if (out.empty()) throw nis::InvalidArgument("trajectory index out of range");
    return out;
  }
  const nis::Grid2D grid(a.n, a.n, a.dx > 0.0 ? a.dx : 2.0 * std::numbers::pi / static_cast<double>(a.n));
  std::mt19937_64 rng(a.seed);
  auto p = nis::data::sample_params(rng);
  if (a.vx) p.vx = *a.vx;
  if (a.vy) p.vy = *a.vy;
  if (a.dxx) p.dxx = *a.dxx;
  if (a.dyy) p.dyy = *a.dyy;
  out.push_back({"generated", nis::data::make_problem(grid, p, a.dt, a.eps),
                 nis::data::init_condition(grid, p)});
  return out;
}

void add_problem_options(CLI::App* app, ProblemArgs& a) {
  app->add_option("--data", a.data, "Dataset directory supplying the problem(s)");
  app->add_option("--trajectory", a.trajectory, "Trajectory index within --data");
  app->add_flag("--all", a.all, "Use every trajectory in --data");
  app->add_option("--n", a.n, "Nodes per side when no dataset is given");
  app->add_option("--dx", a.dx, "Grid spacing (default 2*pi/n)");
  app->add_option("--dt", a.dt, "Time step");
  app->add_option("--eps", a.eps, "Implicitness weight");
  app->add_option("--vx", a.vx, "Advection velocity x (default: sampled)");
  app->add_option("--vy", a.vy, "Advection velocity y (default: sampled)");
  app->add_option("--dxx", a.dxx, "Diffusivity x (default: sampled)");
  app->add_option("--dyy", a.dyy, "Diffusivity y (default: sampled)");
}

// ---------------------------------------------------------------- spectral

struct SpectralArgs {
  std::string config;
  std::string model;
  std::string out;
  std::optional<std::uint64_t> seed;
  ProblemArgs problem;
  bool require_certified = false;
};

int cmd_spectral(SpectralArgs a) {
  const json j = load_config(a.config, {"radius_iters", "radius_probes", "norm_tol",
                                        "norm_max_iter", "margin", "seed"});
  nis::spectral::SpectralOptions opt;
  take(j, "radius_iters", opt.radius_iters);
  take(j, "radius_probes", opt.radius_probes);
  take(j, "norm_tol", opt.norm.tol);
  take(j, "norm_max_iter", opt.norm.max_iter);
  take(j, "margin", opt.margin);
  take(j, "seed", opt.seed);
  if (a.seed) {
    opt.seed = *a.seed;
    a.problem.seed = *a.seed;
  }
  opt.norm.seed = opt.seed;

  std::optional<nis::CorrectionModel> model;
  if (!a.model.empty()) model = nis::deserialize_model(read_text(a.model));

  bool all_certified = true;
  json instances = json::array();
  for (const auto& inst : select_problems(a.problem)) {
    const nis::SemiImplicitIterator base(inst.problem, inst.state);
    json ij{{"instance", inst.label},
            {"base_certification", nis::spectral::to_json(nis::spectral::certify_base(inst.problem, opt))},
            {"base", nis::spectral::to_json(nis::spectral::analyze(base.homogeneous_map(), opt))}};
    bool certified = ij["base"]["certified"].get<bool>();
    if (model) {
      nis::check_compatible(*model, inst.problem);
      const nis::NeuralIterator it(base, model->corrections);
      const auto r = nis::spectral::analyze(it.homogeneous_map(), opt);
      ij["corrected"] = nis::spectral::to_json(r);
      const auto b = nis::spectral::corrected_norm_bound(inst.problem, model->corrections, opt.norm);
      ij["corrected_norm_bound"] = {{"value", b.value},
                                    {"transfer_condition", b.transfer_condition},
                                    {"scaled", b.scaled ? json(*b.scaled) : json()}};
      certified = r.certified;
    }
    all_certified = all_certified && certified;
    instances.push_back(std::move(ij));
  }
  emit(json{{"all_certified", all_certified}, {"instances", std::move(instances)}}, a.out);
  return (a.require_certified && !all_certified) ? kExitCertification : kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string model;
  std::string out;
  std::size_t reps = 50;
  std::size_t neural_iters = 10;
  std::size_t semi_iters = 25;
  std::optional<std::uint64_t> seed;
  ProblemArgs problem;
};

int cmd_bench(BenchArgs a) {
  if (a.seed) a.problem.seed = *a.seed;
  a.problem.all = false;
  const auto inst = select_problems(a.problem).front();
  nis::CorrectionModel model;
  if (a.model.empty()) {
    std::mt19937_64 rng(a.problem.seed);
    std::vector<nis::CorrectionStack> hs;
    for (std::size_t i = 0; i < inst.problem.terms.size(); ++i)
      hs.push_back(nis::CorrectionStack::initialized(3, 4, rng));
    model = nis::make_model(inst.problem, std::move(hs));
  } else {
    model = nis::deserialize_model(read_text(a.model));
  }
  const auto b = nis::eval::bench(model, inst.problem, inst.state, a.reps, a.neural_iters, a.semi_iters);
  auto j = nis::eval::to_json(b);
  j["grid"] = {inst.problem.grid.nx(), inst.problem.grid.ny()};
  emit(j, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- plot

struct PlotArgs {
  std::string csv;
  std::string out;
  std::string title = "MSE against the converged reference";
  bool normalized = false;
};

int cmd_plot(const PlotArgs& a) {
  std::ifstream is(a.csv);
  if (!is) throw nis::ParseError("cannot open " + a.csv);
  const auto rows = nis::eval::read_csv(is);
  const std::string svg = nis::eval::render_svg(nis::eval::summarize(rows), a.title, a.normalized);
  if (a.out.empty())
    std::cout << svg;
  else
    write_text_atomic(a.out, svg);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned semi-implicit iterative solver toolkit"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* dgc = app.add_subcommand("datagen", "Generate a reference dataset (and held-out variants)");
  dgc->add_option("--config", dg.config, "JSON config")->check(CLI::ExistingFile);
  dgc->add_option("--out", dg.out, "Output directory")->required();
  dgc->add_option("--seed", dg.seed, "Base seed");
  dgc->add_option("--trajectories", dg.trajectories, "Trajectory count");
  dgc->add_option("--steps", dg.steps, "Steps per trajectory");
  dgc->add_option("--threads", dg.threads, "Worker threads (0 = all cores)");
  dgc->add_flag("--variants", dg.variants, "Also write the three held-out variant test sets");

  TrainArgs tr;
  auto* trc = app.add_subcommand("train", "Train the correction stacks");
  trc->add_option("--config", tr.config, "JSON config")->check(CLI::ExistingFile);
  trc->add_option("--data", tr.data, "Dataset directory")->required();
  trc->add_option("--out", tr.out, "Run directory (model, checkpoint, log)")->required();
  trc->add_option("--seed", tr.seed, "Training seed");
  trc->add_option("--epochs", tr.epochs, "Epoch count");
  trc->add_option("--threads", tr.threads, "Worker threads");
  trc->add_flag("--resume", tr.resume, "Continue from the run directory's checkpoint");

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "Compare corrected and plain iterations against a dataset");
  evc->add_option("--config", ev.config, "JSON config")->check(CLI::ExistingFile);
  evc->add_option("--model", ev.model, "Model file")->required();
  evc->add_option("--data", ev.data, "Dataset directory")->required();
  evc->add_option("--out", ev.out, "Report JSON (default stdout)");
  evc->add_option("--csv", ev.csv, "Per-(trajectory, step) CSV");
  evc->add_option("--svg", ev.svg, "Line plot with percentile bands");
  evc->add_option("--split", ev.split, "train | val | test | all");
  evc->add_option("--neural-iters", ev.neural_iters, "Corrected iterations per step");
  evc->add_option("--semi-iters", ev.semi_iters, "Plain iterations per step");
  evc->add_option("--steps", ev.steps, "Time points");
  evc->add_option("--threads", ev.threads, "Worker threads");
  evc->add_flag("--normalized", ev.normalized, "Plot errors normalized by the initial mean square");

  SpectralArgs sp;
  auto* spc = app.add_subcommand("spectral", "Norm and radius estimates of the iteration matrices");
  spc->add_option("--config", sp.config, "JSON config")->check(CLI::ExistingFile);
  spc->add_option("--model", sp.model, "Model file (adds the corrected iteration)");
  spc->add_option("--out", sp.out, "Report JSON (default stdout)");
  spc->add_option("--seed", sp.seed, "Probe and parameter seed");
  spc->add_flag("--require-certified", sp.require_certified, "Exit 3 unless every instance is certified");
  add_problem_options(spc, sp.problem);

  BenchArgs bn;
  auto* bnc = app.add_subcommand("bench", "Time one corrected step against one plain step");
  bnc->add_option("--model", bn.model, "Model file (default: freshly initialized stacks)");
  bnc->add_option("--out", bn.out, "Timing JSON (default stdout)");
  bnc->add_option("--reps", bn.reps, "Repetitions");
  bnc->add_option("--neural-iters", bn.neural_iters, "Corrected iterations per step");
  bnc->add_option("--semi-iters", bn.semi_iters, "Plain iterations per step");
  bnc->add_option("--seed", bn.seed, "Parameter seed");
  add_problem_options(bnc, bn.problem);

  PlotArgs pl;
  auto* plc = app.add_subcommand("plot", "Render an evaluation CSV as SVG");
  plc->add_option("--csv", pl.csv, "Evaluation CSV")->required();
  plc->add_option("--out", pl.out, "SVG file (default stdout)");
  plc->add_option("--title", pl.title, "Plot title");
  plc->add_flag("--normalized", pl.normalized, "Use normalized errors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*dgc) return cmd_datagen(dg);
    if (*trc) return cmd_train(tr);
    if (*evc) return cmd_eval(ev);
    if (*spc) return cmd_spectral(sp);
    if (*bnc) return cmd_bench(bn);
    if (*plc) return cmd_plot(pl);
  } catch (const nis::CertificationRefused& e) {
    std::cerr << "certification refused: " << e.what() << "\n";
    return kExitCertification;
  } catch (const nis::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
