#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nis/grid.hpp"
#include "nis/semi_implicit.hpp"
#include "nis/spectral.hpp"

namespace nis::data {

/// How the spread of the initial-condition amplitudes is read.
enum class SpreadReading { variance, stddev };

struct SamplingRanges {
  double v_min = -2.0;
  double v_max = 2.0;
  double d_min = 0.2;
  double d_max = 0.8;
  double amp_spread = 0.02;
  SpreadReading spread_reading = SpreadReading::variance;
  int wave_min = 1;
  int wave_max = 9;
};

struct SimParams {
  double vx = 0.0;
  double vy = 0.0;
  double dxx = 0.5;
  double dyy = 0.5;
  double amp_lambda = 0.0;  // cosine amplitude
  double amp_gamma = 0.0;   // sine amplitude
  int wave_k = 1;
  int wave_l = 1;
  std::uint64_t seed = 0;
};

SimParams sample_params(std::mt19937_64& rng, const SamplingRanges& ranges = {});

/// lambda cos(kx + ly) + gamma sin(kx + ly) at x = ix dx, y = iy dx, with the
/// outer ring set to zero.
Field init_condition(const Grid2D& grid, const SimParams& params);

PdeProblem make_problem(const Grid2D& grid, const SimParams& params, double dt, double eps);

struct OracleOptions {
  double tol = 1e-12;
  std::size_t max_iter = 500000;
  /// Refuse (CertificationRefused) when the base iteration is not certified.
  bool require_certified = true;
  spectral::SpectralOptions spectral{};
};

/// steps + 1 frames; each step solved to `tol` warm-started from the previous frame.
std::vector<Field> reference_trajectory(const PdeProblem& problem, const Field& u0,
                                        std::size_t steps, const OracleOptions& options = {});

enum class Split { train, val, test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct TrajectoryRecord {
  std::size_t index = 0;
  std::string file;
  std::uint64_t checksum = 0;
  Split split = Split::train;
  SimParams params;
};

struct DatasetManifest {
  int format_version = 1;
  std::string name;
  std::size_t nx = 64;
  std::size_t ny = 64;
  double dx = 2.0 * std::numbers::pi / 64.0;
  double dt = 0.2;
  double eps = 0.9;
  std::size_t steps = 50;
  double oracle_tol = 1e-12;
  std::uint64_t base_seed = 0;
  std::string checksum_algorithm = "crc64-xz";
  SamplingRanges sampling;
  std::vector<TrajectoryRecord> trajectories;

  Grid2D grid() const { return Grid2D(nx, ny, dx); }
};

struct GenerateConfig {
  std::string name = "base";
  std::size_t nx = 64;
  std::size_t ny = 64;
  double dx = 2.0 * std::numbers::pi / 64.0;
  double dt = 0.2;
  double eps = 0.9;
  std::size_t trajectories = 200;
  std::size_t steps = 50;
  std::uint64_t base_seed = 0;
  double oracle_tol = 1e-12;
  std::size_t oracle_max_iter = 500000;
  SamplingRanges sampling;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  /// Every trajectory goes to the test split (held-out variant sets).
  bool all_test = false;
  /// Worker threads; 0 = hardware concurrency.
  unsigned threads = 0;

  void validate() const;
};

/// Writes traj_%04d.f64 files then manifest.json (atomically, last).
DatasetManifest generate(const GenerateConfig& config, const std::filesystem::path& out_dir);

/// Three held-out settings derived from `base`: eps = 0.75; dt = 0.12; half
/// the spacing (twice the nodes) over the same domain. Fresh seeds.
std::vector<GenerateConfig> variant_configs(const GenerateConfig& base,
                                            std::size_t trajectories = 20, std::size_t steps = 10);

/// generate() for each variant into out_root/<name>.
std::vector<DatasetManifest> variant_testsets(const GenerateConfig& base,
                                              const std::filesystem::path& out_root,
                                              std::size_t trajectories = 20,
                                              std::size_t steps = 10);

struct Trajectory {
  TrajectoryRecord record;
  std::vector<Field> frames;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> trajectories;

  Grid2D grid() const { return manifest.grid(); }
  PdeProblem problem(const Trajectory& t) const;
  std::vector<const Trajectory*> split(Split s) const;
};

DatasetManifest read_manifest(const std::filesystem::path& dir);
/// Loads every trajectory; checksum mismatches throw ParseError.
Dataset load_dataset(const std::filesystem::path& dir, bool verify_checksums = true);

/// CRC-64/XZ (ECMA-182 polynomial, reflected, inverted).
std::uint64_t crc64(std::span<const std::byte> bytes);

/// Raw little-endian float64, frame-major then row-major.
std::vector<std::byte> encode_frames(std::span<const Field> frames);
std::vector<Field> decode_frames(std::span<const std::byte> bytes, const Grid2D& grid,
                                 std::size_t frame_count);

}  // namespace nis::data
