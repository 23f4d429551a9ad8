#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "dense_oracle.hpp"
#include "nis/datagen.hpp"
#include "nis/neural_iterator.hpp"
#include "temp_dir.hpp"

namespace nis {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::TempDir;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args) {
  static TempDir scratch;
  const fs::path err = scratch.path() / "stderr.txt";
  const std::string cmd = std::string(NIS_CLI_PATH) + " " + args + " 2>" + err.string();
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream es(err);
  std::stringstream ss;
  ss << es.rdbuf();
  r.err = ss.str();
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// 16x16 dataset with train/val/test trajectories, shared across tests.
const fs::path& small_data() {
  static TempDir dir;
  static bool made = false;
  if (!made) {
    write(dir.path() / "gen.json",
          R"({"schema_version": 1, "name": "cli", "nx": 16, "dx": 0.39269908169872414,
              "trajectories": 10, "steps": 4, "base_seed": 3, "threads": 1})");
    const auto r = run("datagen --config " + q(dir.path() / "gen.json") + " --out " + q(dir.path() / "ds"));
    EXPECT_EQ(r.code, 0) << r.err;
    made = true;
  }
  static const fs::path ds = dir.path() / "ds";
  return ds;
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("datagen").code, 1);  // --out is required
  EXPECT_EQ(run("plot --csv").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, DatagenSmokeAndDeterminism) {
  TempDir dir;
  write(dir.path() / "c.json", R"({"nx": 16, "dx": 0.39269908169872414, "trajectories": 2, "steps": 3})");
  const auto a = run("datagen --config " + q(dir.path() / "c.json") + " --seed 5 --out " + q(dir.path() / "a"));
  ASSERT_EQ(a.code, 0) << a.err;
  const auto ds = data::load_dataset(dir.path() / "a");
  EXPECT_EQ(ds.trajectories.size(), 2u);
  EXPECT_EQ(ds.manifest.base_seed, 5u);
  EXPECT_EQ(ds.manifest.steps, 3u);
  ASSERT_EQ(run("datagen --config " + q(dir.path() / "c.json") + " --seed 5 --out " + q(dir.path() / "b")).code, 0);
  for (const auto& t : ds.trajectories)
    EXPECT_EQ(slurp(dir.path() / "a" / t.record.file), slurp(dir.path() / "b" / t.record.file));
}

TEST(Cli, DatagenDefaultsGiveTwoHundredTrajectories) {
  // only the grid is shrunk; every other setting keeps its default
  TempDir dir;
  write(dir.path() / "c.json", R"({"nx": 5, "dx": 1.2566370614359172, "steps": 1})");
  ASSERT_EQ(run("datagen --config " + q(dir.path() / "c.json") + " --out " + q(dir.path() / "d")).code, 0);
  const auto m = data::read_manifest(dir.path() / "d");
  EXPECT_EQ(m.trajectories.size(), 200u);
  EXPECT_EQ(m.dt, 0.2);
  EXPECT_EQ(m.eps, 0.9);
}

TEST(Cli, DatagenRejectsBadConfigAndPath) {
  TempDir dir;
  write(dir.path() / "bad.json", R"({"nx": 16, "trajectoriez": 2})");
  auto r = run("datagen --config " + q(dir.path() / "bad.json") + " --out " + q(dir.path() / "o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("trajectoriez"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir.path() / "o" / "manifest.json"));

  write(dir.path() / "v.json", R"({"schema_version": 7})");
  EXPECT_EQ(run("datagen --config " + q(dir.path() / "v.json") + " --out " + q(dir.path() / "o")).code, 1);

  write(dir.path() / "file", "x");
  write(dir.path() / "ok.json", R"({"nx": 8, "dx": 0.785, "trajectories": 1, "steps": 1})");
  r = run("datagen --config " + q(dir.path() / "ok.json") + " --out " + q(dir.path() / "file" / "sub"));
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(dir.path() / "file" / "sub" / "manifest.json"));
}

TEST(Cli, DatagenNonConvergenceExitsTwo) {
  TempDir dir;
  write(dir.path() / "c.json",
        R"({"nx": 16, "dx": 0.39269908169872414, "trajectories": 1, "steps": 2, "oracle_max_iter": 2})");
  const auto r = run("datagen --config " + q(dir.path() / "c.json") + " --out " + q(dir.path() / "o"));
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_FALSE(fs::exists(dir.path() / "o" / "manifest.json"));
}

TEST(Cli, TrainZeroEpochsIsPlainIteration) {
  TempDir run_dir;
  const auto r = run("train --data " + q(small_data()) + " --out " + q(run_dir.path()) + " --epochs 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto model = deserialize_model(slurp(run_dir.path() / "model.json"));
  const auto ds = data::load_dataset(small_data());
  const auto& t = ds.trajectories[0];
  const SemiImplicitIterator base(ds.problem(t), t.frames[0]);
  const NeuralIterator it(base, model.corrections);
  std::mt19937_64 rng(1);
  const Field u = testing::random_field(ds.grid(), rng);
  EXPECT_EQ(testing::max_abs_diff(it.apply(u), base.apply(u)), 0.0);
  // baseline record only
  EXPECT_EQ(std::count(std::istreambuf_iterator<char>(std::ifstream(run_dir.path() / "train_log.jsonl").rdbuf()),
                       std::istreambuf_iterator<char>(), '\n'),
            1);
}

std::vector<json> log_without_timing(const fs::path& p) {
  std::vector<json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) {
    auto j = json::parse(line);
    j.erase("seconds");
    out.push_back(j);
  }
  return out;
}

TEST(Cli, ResumeReproducesUninterruptedRun) {
  TempDir a, b, cfg;
  write(cfg.path() / "t.json",
        R"({"batch_size": 4, "k_max": 4, "horizon": 2, "lr": 0.01, "radius_check_iters": 50})");
  const std::string common = " --config " + q(cfg.path() / "t.json") + " --data " + q(small_data()) + " --seed 9";
  ASSERT_EQ(run("train" + common + " --epochs 3 --out " + q(a.path())).code, 0);
  ASSERT_EQ(run("train" + common + " --epochs 1 --out " + q(b.path())).code, 0);
  const auto r = run("train" + common + " --epochs 3 --resume --out " + q(b.path()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto la = log_without_timing(a.path() / "train_log.jsonl");
  const auto lb = log_without_timing(b.path() / "train_log.jsonl");
  ASSERT_EQ(la.size(), 4u);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(slurp(a.path() / "model.json"), slurp(b.path() / "model.json"));

  // resuming under a different setup is refused
  write(cfg.path() / "other.json", R"({"batch_size": 2})");
  EXPECT_EQ(run("train --config " + q(cfg.path() / "other.json") + " --data " + q(small_data()) +
                " --seed 9 --epochs 4 --resume --out " + q(b.path()))
                .code,
            1);
  write(cfg.path() / "unknown.json", R"({"learning_rate": 0.1})");
  EXPECT_EQ(run("train --config " + q(cfg.path() / "unknown.json") + " --data " + q(small_data()) +
                " --out " + q(cfg.path() / "x"))
                .code,
            1);
}

TEST(Cli, EvalPlotAndIncompatibleModel) {
  TempDir dir;
  ASSERT_EQ(run("train --data " + q(small_data()) + " --out " + q(dir.path()) + " --epochs 0").code, 0);
  const auto r = run("eval --model " + q(dir.path() / "model.json") + " --data " + q(small_data()) +
                     " --split all --neural-iters 6 --semi-iters 6 --csv " + q(dir.path() / "e.csv") +
                     " --svg " + q(dir.path() / "e.svg") + " --out " + q(dir.path() / "e.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(dir.path() / "e.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "trajectory,step,neural_mse,semi_mse,neural_nmse,semi_nmse");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 6u);
    EXPECT_EQ(cells[2], cells[3]);  // bitwise-identical series
    ++rows;
  }
  EXPECT_EQ(rows, 10u * 4u);
  const auto report = json::parse(slurp(dir.path() / "e.json"));
  for (const auto& s : report.at("steps")) {
    EXPECT_LE(s.at("neural").at("p25").get<double>(), s.at("neural").at("p50").get<double>());
    EXPECT_LE(s.at("neural").at("p50").get<double>(), s.at("neural").at("p75").get<double>());
  }
  EXPECT_EQ(slurp(dir.path() / "e.svg").rfind("<?xml", 0), 0u);

  const auto plot = run("plot --csv " + q(dir.path() / "e.csv") + " --out " + q(dir.path() / "p.svg"));
  EXPECT_EQ(plot.code, 0) << plot.err;
  EXPECT_NE(slurp(dir.path() / "p.svg").find("class=\"band\""), std::string::npos);
  write(dir.path() / "empty.csv", "");
  EXPECT_EQ(run("plot --csv " + q(dir.path() / "empty.csv")).code, 1);

  auto ds = data::load_dataset(small_data());
  auto p = ds.problem(ds.trajectories[0]);
  p.terms[1].op = p.terms[1].op.scaled(2.0);
  std::vector<CorrectionStack> zeros(4, CorrectionStack::zeros(3, 4));
  write(dir.path() / "other.json", serialize_model(make_model(p, zeros)));
  const auto bad = run("eval --model " + q(dir.path() / "other.json") + " --data " + q(small_data()));
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("stencil set"), std::string::npos);
}

TEST(Cli, SpectralReports) {
  TempDir dir;
  auto r = run("spectral --n 8 --vx 0 --vy 0 --dxx 0 --dyy 0");
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  const auto& base = j.at("instances").at(0).at("base");
  EXPECT_EQ(base.at("norm_estimate").get<double>(), 0.0);
  EXPECT_EQ(base.at("radius_estimate").get<double>(), 0.0);

  ASSERT_EQ(run("train --data " + q(small_data()) + " --out " + q(dir.path()) + " --epochs 0").code, 0);
  r = run("spectral --model " + q(dir.path() / "model.json") + " --data " + q(small_data()) + " --all");
  ASSERT_EQ(r.code, 0) << r.err;
  j = json::parse(r.out);
  ASSERT_EQ(j.at("instances").size(), 10u);
  for (const auto& inst : j.at("instances")) {
    EXPECT_NEAR(inst.at("corrected").at("norm_estimate").get<double>(),
                inst.at("base").at("norm_estimate").get<double>(), 1e-12);
    EXPECT_NEAR(inst.at("corrected").at("radius_estimate").get<double>(),
                inst.at("base").at("radius_estimate").get<double>(), 1e-9);
  }
  EXPECT_TRUE(j.at("all_certified").get<bool>());

  // strongly advective, large step: the plain iteration is not contractive
  r = run("spectral --n 8 --dx 0.1 --dt 5 --eps 1 --vx 50 --vy 0 --dxx 0.01 --dyy 0.01 --require-certified");
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, BenchSmokeAndGuard) {
  const auto r = run("bench --reps 1 --n 16");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_GT(j.at("neural").at("median_s").get<double>(), 0.0);
  EXPECT_GT(j.at("semi").at("median_s").get<double>(), 0.0);
  EXPECT_TRUE(j.contains("ratio"));
  EXPECT_EQ(run("bench --reps 0 --n 16").code, 1);
}

}  // namespace
}  // namespace nis
