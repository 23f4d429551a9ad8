#include "nis/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <boost/crc.hpp>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "nis/error.hpp"

namespace nis::data {

namespace fs = std::filesystem;
using nlohmann::json;

SimParams sample_params(std::mt19937_64& rng, const SamplingRanges& r) {
  std::uniform_real_distribution<double> v(r.v_min, r.v_max);
  std::uniform_real_distribution<double> d(r.d_min, r.d_max);
  const double sd =
      r.spread_reading == SpreadReading::variance ? std::sqrt(r.amp_spread) : r.amp_spread;
  std::normal_distribution<double> amp(0.0, sd);
  std::uniform_int_distribution<int> wave(r.wave_min, r.wave_max);
  SimParams p;
  p.vx = v(rng);
  p.vy = v(rng);
  p.dxx = d(rng);
  p.dyy = d(rng);
  p.amp_lambda = amp(rng);
  p.amp_gamma = amp(rng);
  p.wave_k = wave(rng);
  p.wave_l = wave(rng);
  return p;
}

Field init_condition(const Grid2D& grid, const SimParams& p) {
  Field u(grid);
  const double h = grid.dx();
  for (std::size_t iy = 1; iy + 1 < grid.ny(); ++iy) {
    for (std::size_t ix = 1; ix + 1 < grid.nx(); ++ix) {
      const double phase = p.wave_k * (static_cast<double>(ix) * h) +
                           p.wave_l * (static_cast<double>(iy) * h);
      u.at(ix, iy) = p.amp_lambda * std::cos(phase) + p.amp_gamma * std::sin(phase);
    }
  }
  return u;
}

PdeProblem make_problem(const Grid2D& grid, const SimParams& p, double dt, double eps) {
  return make_advection_diffusion(grid, {p.vx, p.vy, p.dxx, p.dyy}, dt, eps);
}

std::vector<Field> reference_trajectory(const PdeProblem& problem, const Field& u0,
                                        std::size_t steps, const OracleOptions& options) {
  if (options.require_certified) {
    const auto cert = spectral::certify_base(problem, options.spectral);
    if (!cert.certified) {
      std::ostringstream os;
      os << "reference_trajectory: iteration matrix not certified (bound "
         << cert.contraction_bound << ", measured radius "
         << (cert.measured_radius ? *cert.measured_radius : -1.0) << ")";
      throw CertificationRefused(os.str());
    }
  }
  std::vector<Field> frames;
  frames.reserve(steps + 1);
  frames.push_back(u0);
  SemiImplicitIterator it(problem, u0);
  for (std::size_t s = 0; s < steps; ++s) {
    const Field& prev = frames.back();
    it = it.with_previous_state(prev);
    auto res = fixed_point_solve(it, prev, options.tol, options.max_iter);
    frames.push_back(std::move(res.solution));
  }
  return frames;
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split '" + s + "'");
}

std::uint64_t crc64(std::span<const std::byte> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0xFFFFFFFFFFFFFFFFULL, 0xFFFFFFFFFFFFFFFFULL,
                     true, true>
      crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::vector<std::byte> encode_frames(std::span<const Field> frames) {
  std::size_t total = 0;
  for (const auto& f : frames) total += f.size();
  std::vector<std::byte> out(total * sizeof(double));
  std::size_t pos = 0;
  for (const auto& f : frames) {
    for (double v : f.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) out[pos++] = static_cast<std::byte>((bits >> (8 * b)) & 0xFF);
    }
  }
  return out;
}

std::vector<Field> decode_frames(std::span<const std::byte> bytes, const Grid2D& grid,
                                 std::size_t frame_count) {
  if (bytes.size() != frame_count * grid.size() * sizeof(double)) {
    std::ostringstream os;
    os << "trajectory file has " << bytes.size() << " bytes, expected "
       << frame_count * grid.size() * sizeof(double);
    throw ParseError(os.str());
  }
  std::vector<Field> frames;
  frames.reserve(frame_count);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < frame_count; ++f) {
    std::vector<double> v(grid.size());
    for (double& x : v) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[pos++])) << (8 * b);
      x = std::bit_cast<double>(bits);
    }
    frames.emplace_back(grid, std::move(v));
  }
  return frames;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw ParseError("bad checksum '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("bad checksum '" + s + "'");
  }
}

json params_to_json(const SimParams& p) {
  return json{{"vx", p.vx},         {"vy", p.vy},           {"dxx", p.dxx},
              {"dyy", p.dyy},       {"amp_lambda", p.amp_lambda}, {"amp_gamma", p.amp_gamma},
              {"wave_k", p.wave_k}, {"wave_l", p.wave_l},   {"seed", p.seed}};
}

SimParams params_from_json(const json& j) {
  SimParams p;
  p.vx = j.at("vx").get<double>();
  p.vy = j.at("vy").get<double>();
  p.dxx = j.at("dxx").get<double>();
  p.dyy = j.at("dyy").get<double>();
  p.amp_lambda = j.at("amp_lambda").get<double>();
  p.amp_gamma = j.at("amp_gamma").get<double>();
  p.wave_k = j.at("wave_k").get<int>();
  p.wave_l = j.at("wave_l").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

json sampling_to_json(const SamplingRanges& r) {
  return json{{"v", {r.v_min, r.v_max}},
              {"d", {r.d_min, r.d_max}},
              {"amp_spread", r.amp_spread},
              {"spread_reading", r.spread_reading == SpreadReading::variance ? "variance" : "stddev"},
              {"wave", {r.wave_min, r.wave_max}}};
}

SamplingRanges sampling_from_json(const json& j) {
  SamplingRanges r;
  r.v_min = j.at("v").at(0).get<double>();
  r.v_max = j.at("v").at(1).get<double>();
  r.d_min = j.at("d").at(0).get<double>();
  r.d_max = j.at("d").at(1).get<double>();
  r.amp_spread = j.at("amp_spread").get<double>();
  const auto reading = j.at("spread_reading").get<std::string>();
  if (reading == "variance")
    r.spread_reading = SpreadReading::variance;
  else if (reading == "stddev")
    r.spread_reading = SpreadReading::stddev;
  else
    throw ParseError("unknown spread_reading '" + reading + "'");
  r.wave_min = j.at("wave").at(0).get<int>();
  r.wave_max = j.at("wave").at(1).get<int>();
  return r;
}

json manifest_to_json(const DatasetManifest& m) {
  json trajs = json::array();
  for (const auto& t : m.trajectories) {
    trajs.push_back(json{{"index", t.index},
                         {"file", t.file},
                         {"checksum", hex64(t.checksum)},
                         {"split", to_string(t.split)},
                         {"params", params_to_json(t.params)}});
  }
  return json{{"format_version", m.format_version},
              {"name", m.name},
              {"grid", {{"nx", m.nx}, {"ny", m.ny}, {"dx", m.dx}}},
              {"dt", m.dt},
              {"eps", m.eps},
              {"steps", m.steps},
              {"frames_per_trajectory", m.steps + 1},
              {"trajectory_count", m.trajectories.size()},
              {"oracle_tol", m.oracle_tol},
              {"base_seed", m.base_seed},
              {"checksum_algorithm", m.checksum_algorithm},
              {"layout", "float64 little-endian, frame-major, row-major (index = iy*nx + ix)"},
              {"sampling", sampling_to_json(m.sampling)},
              {"trajectories", std::move(trajs)}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1) throw ParseError("unsupported dataset format version");
  m.name = j.at("name").get<std::string>();
  m.nx = j.at("grid").at("nx").get<std::size_t>();
  m.ny = j.at("grid").at("ny").get<std::size_t>();
  m.dx = j.at("grid").at("dx").get<double>();
  m.dt = j.at("dt").get<double>();
  m.eps = j.at("eps").get<double>();
  m.steps = j.at("steps").get<std::size_t>();
  m.oracle_tol = j.at("oracle_tol").get<double>();
  m.base_seed = j.at("base_seed").get<std::uint64_t>();
  m.checksum_algorithm = j.at("checksum_algorithm").get<std::string>();
  if (m.checksum_algorithm != "crc64-xz")
    throw ParseError("unsupported checksum algorithm " + m.checksum_algorithm);
  m.sampling = sampling_from_json(j.at("sampling"));
  for (const auto& t : j.at("trajectories")) {
    TrajectoryRecord r;
    r.index = t.at("index").get<std::size_t>();
    r.file = t.at("file").get<std::string>();
    r.checksum = parse_hex64(t.at("checksum").get<std::string>());
    r.split = split_from_string(t.at("split").get<std::string>());
    r.params = params_from_json(t.at("params"));
    m.trajectories.push_back(std::move(r));
  }
  if (j.at("trajectory_count").get<std::size_t>() != m.trajectories.size())
    throw ParseError("manifest trajectory_count disagrees with trajectory list");
  return m;
}

void write_file(const fs::path& path, std::span<const std::byte> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed: " + path.string());
}

std::vector<std::byte> read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(is.tellg());
  is.seekg(0);
  std::vector<std::byte> out(size);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  if (!is) throw ParseError("read failed: " + path.string());
  return out;
}

std::string trajectory_file_name(std::size_t index) {
  std::ostringstream os;
  os << "traj_" << std::setw(4) << std::setfill('0') << index << ".f64";
  return os.str();
}

}  // namespace

void GenerateConfig::validate() const {
  Grid2D(nx, ny, dx);
  if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidArgument("eps must lie in (0, 1]");
  if (trajectories == 0) throw InvalidArgument("trajectories must be at least 1");
  if (steps == 0) throw InvalidArgument("steps must be at least 1");
  if (!(oracle_tol > 0.0)) throw InvalidArgument("oracle_tol must be positive");
  if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
    throw InvalidArgument("split fractions must be non-negative and sum to at most 1");
  if (!(sampling.d_min > 0.0) || sampling.d_max < sampling.d_min)
    throw InvalidArgument("diffusivity range must be positive");
  if (sampling.wave_min < 1 || sampling.wave_max > 9 || sampling.wave_max < sampling.wave_min)
    throw InvalidArgument("wavenumbers must lie in 1..9");
}

DatasetManifest generate(const GenerateConfig& config, const fs::path& out_dir) {
  config.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw Error("cannot create output directory " + out_dir.string());

  DatasetManifest m;
  m.name = config.name;
  m.nx = config.nx;
  m.ny = config.ny;
  m.dx = config.dx;
  m.dt = config.dt;
  m.eps = config.eps;
  m.steps = config.steps;
  m.oracle_tol = config.oracle_tol;
  m.base_seed = config.base_seed;
  m.sampling = config.sampling;
  m.trajectories.resize(config.trajectories);

  // Split by shuffled trajectory index.
  std::vector<std::size_t> order(config.trajectories);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 split_rng(config.base_seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n = config.trajectories;
  const auto n_train = config.all_test ? 0 : static_cast<std::size_t>(std::llround(config.train_fraction * n));
  const auto n_val = config.all_test ? 0 : std::min(n - n_train, static_cast<std::size_t>(std::llround(config.val_fraction * n)));
  for (std::size_t r = 0; r < n; ++r) {
    auto& rec = m.trajectories[order[r]];
    rec.split = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  }

  const Grid2D grid = m.grid();
  OracleOptions oracle;
  oracle.tol = config.oracle_tol;
  oracle.max_iter = config.oracle_max_iter;
  oracle.spectral.radius_probes = 2;

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        auto& rec = m.trajectories[i];
        rec.index = i;
        const std::uint64_t seed = config.base_seed + i;
        std::mt19937_64 rng(seed);
        rec.params = sample_params(rng, config.sampling);
        rec.params.seed = seed;
        const PdeProblem problem = make_problem(grid, rec.params, config.dt, config.eps);
        const auto frames =
            reference_trajectory(problem, init_condition(grid, rec.params), config.steps, oracle);
        const auto bytes = encode_frames(frames);
        rec.file = trajectory_file_name(i);
        rec.checksum = crc64(bytes);
        write_file(out_dir / rec.file, bytes);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  unsigned threads = config.threads ? config.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  const fs::path tmp = out_dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw Error("cannot write manifest in " + out_dir.string());
    os << manifest_to_json(m).dump(2) << "\n";
    if (!os) throw Error("manifest write failed");
  }
  fs::rename(tmp, out_dir / "manifest.json");
  return m;
}

std::vector<GenerateConfig> variant_configs(const GenerateConfig& base, std::size_t trajectories,
                                            std::size_t steps) {
  std::vector<GenerateConfig> out;
  auto make = [&](std::string name, std::uint64_t salt) {
    GenerateConfig c = base;
    c.name = std::move(name);
    c.trajectories = trajectories;
    c.steps = steps;
    c.all_test = true;
    c.base_seed = base.base_seed + salt;
    return c;
  };
  auto eps = make("eps_0.75", 1'000'000);
  eps.eps = 0.75;
  out.push_back(eps);
  auto dt = make("dt_0.12", 2'000'000);
  dt.dt = 0.12;
  out.push_back(dt);
  auto dx = make("dx_0.049", 3'000'000);
  dx.nx = base.nx * 2;
  dx.ny = base.ny * 2;
  dx.dx = base.dx / 2.0;
  out.push_back(dx);
  return out;
}

std::vector<DatasetManifest> variant_testsets(const GenerateConfig& base, const fs::path& out_root,
                                              std::size_t trajectories, std::size_t steps) {
  std::vector<DatasetManifest> out;
  for (const auto& c : variant_configs(base, trajectories, steps))
    out.push_back(generate(c, out_root / c.name));
  return out;
}

PdeProblem Dataset::problem(const Trajectory& t) const {
  return make_problem(grid(), t.record.params, manifest.dt, manifest.eps);
}

std::vector<const Trajectory*> Dataset::split(Split s) const {
  std::vector<const Trajectory*> out;
  for (const auto& t : trajectories)
    if (t.record.split == s) out.push_back(&t);
  return out;
}

DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ParseError("no manifest.json in " + dir.string());
  try {
    return manifest_from_json(json::parse(is));
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
}

Dataset load_dataset(const fs::path& dir, bool verify_checksums) {
  Dataset d;
  d.manifest = read_manifest(dir);
  const Grid2D grid = d.manifest.grid();
  for (const auto& rec : d.manifest.trajectories) {
    const auto bytes = read_file(dir / rec.file);
    if (verify_checksums && crc64(bytes) != rec.checksum)
      throw ParseError("checksum mismatch for " + rec.file);
    d.trajectories.push_back(Trajectory{rec, decode_frames(bytes, grid, d.manifest.steps + 1)});
  }
  return d;
}

}  // namespace nis::data
