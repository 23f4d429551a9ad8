#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nis/datagen.hpp"
#include "nis/neural_iterator.hpp"

namespace nis::train {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::size_t k_min = 1;   // iterations per time step, drawn per sample
  std::size_t k_max = 20;
  std::size_t horizon = 3;  // time steps per rollout window
  std::size_t window_stride = 0;  // 0 = horizon
  std::size_t val_k = 10;
  std::size_t validate_every = 1;
  std::size_t depth = 3;
  std::size_t width = 4;
  std::uint64_t seed = 0;
  /// Power iterations for the per-epoch radius check of the corrected
  /// iteration matrix (0 disables).
  std::size_t radius_check_iters = 300;
  unsigned threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Mean over the window of the per-step MSE between the rolled-out state
/// (k applications per step, source rebuilt from the model's previous state)
/// and the reference frames. frames[0] is the starting state.
double loss(const NeuralIterator& model, std::span<const Field> frames, std::size_t k,
            std::size_t horizon);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<CorrectionStack> grad;
};

LossAndGrad loss_and_grad(const NeuralIterator& model, std::span<const Field> frames,
                          std::size_t k, std::size_t horizon);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

std::vector<double> flatten(const std::vector<CorrectionStack>& stacks);
void unflatten(std::span<const double> flat, std::vector<CorrectionStack>& stacks);

/// Throws NumericalFailure on a non-finite gradient or update (parameters untouched).
void adam_step(AdamState& state, std::vector<CorrectionStack>& params,
               const std::vector<CorrectionStack>& grads, const TrainConfig& config);

struct Window {
  std::size_t trajectory = 0;  // index into Dataset::trajectories
  std::size_t start = 0;       // first frame
};

std::vector<Window> make_windows(const data::Dataset& dataset, data::Split split,
                                 std::size_t horizon, std::size_t stride);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double grad_norm = 0.0;
  std::size_t adam_step = 0;
  std::optional<double> radius;  // corrected iteration matrix, reference problem
  bool radius_ok = true;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

struct TrainState {
  TrainConfig config;
  std::size_t epochs_done = 0;
  std::vector<CorrectionStack> params;
  AdamState adam;
  std::vector<CorrectionStack> best;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> log;
};

std::string serialize_state(const TrainState& s);
TrainState deserialize_state(std::string_view text);

struct TrainResult {
  CorrectionModel model;  // best validation loss
  TrainState state;
};

using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

/// Epoch 0 evaluates the initial (identity-equivalent) model. Passing a
/// checkpointed state resumes; the result is identical to an uninterrupted run.
TrainResult train(const data::Dataset& dataset, const TrainConfig& config,
                  std::optional<TrainState> resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// Mean window loss over a split at a fixed k.
double mean_loss(const data::Dataset& dataset, const std::vector<CorrectionStack>& corrections,
                 const std::vector<Window>& windows, std::size_t k, std::size_t horizon);

}  // namespace nis::train
