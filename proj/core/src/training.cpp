#include "nis/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "nis/error.hpp"
#include "nis/linear_map.hpp"

namespace nis::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw InvalidArgument("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw InvalidArgument("adam_eps must be positive");
  if (batch_size == 0) throw InvalidArgument("batch_size must be at least 1");
  if (k_min == 0 || k_max < k_min) throw InvalidArgument("need 1 <= k_min <= k_max");
  if (horizon == 0) throw InvalidArgument("horizon must be at least 1");
  if (val_k == 0) throw InvalidArgument("val_k must be at least 1");
  if (validate_every == 0) throw InvalidArgument("validate_every must be at least 1");
  if (depth == 0 || width == 0) throw InvalidArgument("depth and width must be at least 1");
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"k_min", c.k_min},
              {"k_max", c.k_max},
              {"horizon", c.horizon},
              {"window_stride", c.window_stride},
              {"val_k", c.val_k},
              {"validate_every", c.validate_every},
              {"depth", c.depth},
              {"width", c.width},
              {"seed", c.seed},
              {"radius_check_iters", c.radius_check_iters},
              {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("training config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "k_min") c.k_min = value.get<std::size_t>();
      else if (key == "k_max") c.k_max = value.get<std::size_t>();
      else if (key == "horizon") c.horizon = value.get<std::size_t>();
      else if (key == "window_stride") c.window_stride = value.get<std::size_t>();
      else if (key == "val_k") c.val_k = value.get<std::size_t>();
      else if (key == "validate_every") c.validate_every = value.get<std::size_t>();
      else if (key == "depth") c.depth = value.get<std::size_t>();
      else if (key == "width") c.width = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "radius_check_iters") c.radius_check_iters = value.get<std::size_t>();
      else if (key == "threads") c.threads = value.get<unsigned>();
      else throw ParseError("unknown training config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
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

void check_window(std::span<const Field> frames, std::size_t k, std::size_t horizon) {
  if (k == 0) throw InvalidArgument("k must be at least 1");
  if (horizon == 0) throw InvalidArgument("horizon must be at least 1");
  if (frames.size() < horizon + 1) throw InvalidArgument("window shorter than horizon + 1 frames");
}

// One corrected update with every stack evaluated (zero stacks included) and
// its layer inputs kept for the reverse pass. Same arithmetic as
// NeuralIterator::apply on the layered path.
Field phi_cached(const SemiImplicitIterator& base, const std::vector<CorrectionStack>& stacks,
                 const Field& u, std::vector<std::vector<std::vector<double>>>& cache) {
  Field p(u.grid());
  base.apply_into(u, p);
  Field w = p;
  w -= u;
  Field corr(u.grid());
  cache.resize(stacks.size());
  const auto& weights = base.term_weights();
  for (std::size_t t = 0; t < stacks.size(); ++t) {
    const Field h = stacks[t].apply_cached(w, cache[t]);
    const Field& wt = weights[t];
    for (std::size_t i = 0; i < corr.size(); ++i) corr[i] += wt[i] * h[i];
  }
  const auto m = base.problem().mask.values();
  for (std::size_t i = 0; i < corr.size(); ++i)
    if (!m[i]) corr[i] = 0.0;
  p += corr;
  return p;
}

}  // namespace

double loss(const NeuralIterator& model, std::span<const Field> frames, std::size_t k,
            std::size_t horizon) {
  check_window(frames, k, horizon);
  double total = 0.0;
  Field s = frames[0];
  for (std::size_t n = 1; n <= horizon; ++n) {
    const NeuralIterator step = model.with_previous_state(s);
    Field u = s;
    for (std::size_t m = 0; m < k; ++m) u = step.apply(u);
    total += mse(u, frames[n]);
    s = std::move(u);
  }
  return total / static_cast<double>(horizon);
}

LossAndGrad loss_and_grad(const NeuralIterator& model, std::span<const Field> frames,
                          std::size_t k, std::size_t horizon) {
  check_window(frames, k, horizon);
  const auto& stacks = model.corrections();
  const Grid2D& grid = model.grid();
  using StackCache = std::vector<std::vector<double>>;
  using PhiCache = std::vector<StackCache>;

  // Forward: keep each step's base iterator, the iterate before every update
  // is not needed (w is layer_inputs[0] of each stack).
  std::vector<SemiImplicitIterator> bases;
  std::vector<std::vector<PhiCache>> caches(horizon, std::vector<PhiCache>(k));
  std::vector<Field> states;
  states.reserve(horizon + 1);
  states.push_back(frames[0]);
  double total = 0.0;
  for (std::size_t n = 1; n <= horizon; ++n) {
    bases.push_back(model.base().with_previous_state(states.back()));
    Field u = states.back();
    for (std::size_t m = 0; m < k; ++m) u = phi_cached(bases.back(), stacks, u, caches[n - 1][m]);
    total += mse(u, frames[n]);
    states.push_back(std::move(u));
  }

  LossAndGrad out;
  out.loss = total / static_cast<double>(horizon);
  for (const auto& s : stacks) out.grad.push_back(s.zeros_like());

  const double scale = 2.0 / (static_cast<double>(grid.size()) * static_cast<double>(horizon));
  const auto mask = model.base().problem().mask.values();
  Field g_state(grid);
  Field scaled(grid);
  for (std::size_t n = horizon; n >= 1; --n) {
    const SemiImplicitIterator& base = bases[n - 1];
    const auto& weights = base.term_weights();
    Field g = g_state;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (states[n][i] - frames[n][i]);
    Field g_source(grid);
    for (std::size_t m = k; m-- > 0;) {
      // u' = p + G sum_t W_t H_t w,  w = p - u,  p = Psi(u)
      Field g_w(grid);
      for (std::size_t t = 0; t < stacks.size(); ++t) {
        for (std::size_t i = 0; i < g.size(); ++i) scaled[i] = mask[i] ? weights[t][i] * g[i] : 0.0;
        g_w += stacks[t].backward(caches[n - 1][m][t], scaled, out.grad[t]);
      }
      Field g_p = g;
      g_p += g_w;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i]) g_source[i] += g_p[i];
      g = base.homogeneous_adjoint(g_p);
      g -= g_w;
    }
    g += base.source_adjoint(g_source);
    g_state = std::move(g);
  }
  return out;
}

std::vector<double> flatten(const std::vector<CorrectionStack>& stacks) {
  std::vector<double> flat;
  for (const auto& s : stacks)
    for (const auto& l : s.layers()) flat.insert(flat.end(), l.weights().begin(), l.weights().end());
  return flat;
}

void unflatten(std::span<const double> flat, std::vector<CorrectionStack>& stacks) {
  std::size_t pos = 0;
  for (auto& s : stacks)
    for (auto& l : s.layers()) {
      auto w = l.weights();
      if (pos + w.size() > flat.size()) throw ShapeMismatch("unflatten: too few values");
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), w.size(), w.begin());
      pos += w.size();
    }
  if (pos != flat.size()) throw ShapeMismatch("unflatten: too many values");
}

void adam_step(AdamState& state, std::vector<CorrectionStack>& params,
               const std::vector<CorrectionStack>& grads, const TrainConfig& c) {
  auto p = flatten(params);
  const auto g = flatten(grads);
  if (g.size() != p.size()) throw ShapeMismatch("adam_step: gradient shape differs");
  for (double x : g)
    if (!std::isfinite(x)) throw NumericalFailure("adam_step: non-finite gradient");
  if (state.m.empty()) {
    state.m.assign(p.size(), 0.0);
    state.v.assign(p.size(), 0.0);
  }
  if (state.m.size() != p.size() || state.v.size() != p.size())
    throw ShapeMismatch("adam_step: optimizer state shape differs");
  auto m = state.m;
  auto v = state.v;
  const std::size_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    p[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
    if (!std::isfinite(p[i])) throw NumericalFailure("adam_step: non-finite parameter");
  }
  unflatten(p, params);
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
}

std::vector<Window> make_windows(const data::Dataset& dataset, data::Split split,
                                 std::size_t horizon, std::size_t stride) {
  if (horizon == 0) throw InvalidArgument("horizon must be at least 1");
  if (stride == 0) stride = horizon;
  std::vector<Window> out;
  for (std::size_t t = 0; t < dataset.trajectories.size(); ++t) {
    const auto& traj = dataset.trajectories[t];
    if (traj.record.split != split) continue;
    for (std::size_t s = 0; s + horizon < traj.frames.size(); s += stride) out.push_back({t, s});
  }
  return out;
}

json to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},         {"train_loss", r.train_loss}, {"grad_norm", r.grad_norm},
         {"adam_step", r.adam_step}, {"radius_ok", r.radius_ok},   {"seconds", r.seconds}};
  j["val_loss"] = r.val_loss ? json(*r.val_loss) : json(nullptr);
  j["radius"] = r.radius ? json(*r.radius) : json(nullptr);
  return j;
}

EpochRecord epoch_record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.adam_step = j.at("adam_step").get<std::size_t>();
  r.radius_ok = j.at("radius_ok").get<bool>();
  r.seconds = j.at("seconds").get<double>();
  if (!j.at("val_loss").is_null()) r.val_loss = j.at("val_loss").get<double>();
  if (!j.at("radius").is_null()) r.radius = j.at("radius").get<double>();
  return r;
}

namespace {

std::vector<CorrectionStack> stacks_like(std::size_t count, const TrainConfig& c) {
  return std::vector<CorrectionStack>(count, CorrectionStack::zeros(c.depth, c.width));
}

}  // namespace

std::string serialize_state(const TrainState& s) {
  json log = json::array();
  for (const auto& r : s.log) log.push_back(to_json(r));
  json j{{"format", "nis-train-state"},
         {"version", 1},
         {"config", to_json(s.config)},
         {"epochs_done", s.epochs_done},
         {"stack_count", s.params.size()},
         {"params", flatten(s.params)},
         {"adam", {{"m", s.adam.m}, {"v", s.adam.v}, {"step", s.adam.step}}},
         {"best", flatten(s.best)},
         {"best_val", s.best_val},
         {"best_epoch", s.best_epoch},
         {"log", std::move(log)}};
  return j.dump();
}

TrainState deserialize_state(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != "nis-train-state" || j.at("version") != 1)
      throw ParseError("not a training state (format/version)");
    TrainState s;
    s.config = train_config_from_json(j.at("config"));
    s.epochs_done = j.at("epochs_done").get<std::size_t>();
    const auto count = j.at("stack_count").get<std::size_t>();
    s.params = stacks_like(count, s.config);
    s.best = stacks_like(count, s.config);
    unflatten(j.at("params").get<std::vector<double>>(), s.params);
    unflatten(j.at("best").get<std::vector<double>>(), s.best);
    s.adam.m = j.at("adam").at("m").get<std::vector<double>>();
    s.adam.v = j.at("adam").at("v").get<std::vector<double>>();
    s.adam.step = j.at("adam").at("step").get<std::size_t>();
    s.best_val = j.at("best_val").get<double>();
    s.best_epoch = j.at("best_epoch").get<std::size_t>();
    for (const auto& r : j.at("log")) s.log.push_back(epoch_record_from_json(r));
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("training state: ") + e.what());
  } catch (const ShapeMismatch& e) {
    throw ParseError(std::string("training state: ") + e.what());
  }
}

namespace {

NeuralIterator window_model(const data::Dataset& d, const Window& w,
                            const std::vector<CorrectionStack>& stacks) {
  const auto& traj = d.trajectories[w.trajectory];
  return NeuralIterator(SemiImplicitIterator(d.problem(traj), traj.frames[w.start]), stacks);
}

std::span<const Field> window_frames(const data::Dataset& d, const Window& w, std::size_t horizon) {
  const auto& frames = d.trajectories[w.trajectory].frames;
  return std::span<const Field>(frames).subspan(w.start, horizon + 1);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; first exception wins.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(threads, n); ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

bool same_training_setup(const TrainConfig& a, const TrainConfig& b) {
  auto ja = to_json(a);
  auto jb = to_json(b);
  for (const char* k : {"epochs", "threads", "validate_every", "radius_check_iters"}) {
    ja.erase(k);
    jb.erase(k);
  }
  return ja == jb;
}

}  // namespace

double mean_loss(const data::Dataset& dataset, const std::vector<CorrectionStack>& corrections,
                 const std::vector<Window>& windows, std::size_t k, std::size_t horizon) {
  if (windows.empty()) throw InvalidArgument("mean_loss: no windows");
  double total = 0.0;
  for (const auto& w : windows)
    total += loss(window_model(dataset, w, corrections), window_frames(dataset, w, horizon), k,
                  horizon);
  return total / static_cast<double>(windows.size());
}

TrainResult train(const data::Dataset& dataset, const TrainConfig& config,
                  std::optional<TrainState> resume, const EpochCallback& on_epoch) {
  config.validate();
  const auto train_windows =
      make_windows(dataset, data::Split::train, config.horizon, config.window_stride);
  const auto val_windows =
      make_windows(dataset, data::Split::val, config.horizon, config.window_stride);
  if (train_windows.empty()) throw InvalidArgument("train: no training windows in dataset");
  const auto& selection_windows = val_windows.empty() ? train_windows : val_windows;
  const std::size_t term_count = 4;
  const auto ref_traj = train_windows.front().trajectory;
  const PdeProblem ref_problem = dataset.problem(dataset.trajectories[ref_traj]);
  if (ref_problem.terms.size() != term_count) throw ShapeMismatch("unexpected term count");

  auto radius_of = [&](const std::vector<CorrectionStack>& stacks) -> std::optional<double> {
    if (config.radius_check_iters == 0) return std::nullopt;
    const NeuralIterator it(
        SemiImplicitIterator(ref_problem, dataset.trajectories[ref_traj].frames.front()), stacks);
    return spectral::spectral_radius(it.homogeneous_map(), config.radius_check_iters, 1,
                                     config.seed)
        .value;
  };

  TrainState state;
  if (resume) {
    state = std::move(*resume);
    if (!same_training_setup(state.config, config))
      throw InvalidArgument("resume: checkpoint was produced with a different configuration");
    if (state.params.size() != term_count) throw ShapeMismatch("resume: wrong stack count");
    state.config = config;
  } else {
    state.config = config;
    std::mt19937_64 rng(config.seed);
    for (std::size_t t = 0; t < term_count; ++t)
      state.params.push_back(CorrectionStack::initialized(config.depth, config.width, rng));
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord r;
    r.epoch = 0;
    r.train_loss = mean_loss(dataset, state.params, train_windows, config.val_k, config.horizon);
    r.val_loss = mean_loss(dataset, state.params, selection_windows, config.val_k, config.horizon);
    r.radius = radius_of(state.params);
    r.radius_ok = !r.radius || *r.radius < 1.0;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.best = state.params;
    state.best_val = *r.val_loss;
    state.best_epoch = 0;
    state.log.push_back(r);
    if (on_epoch) on_epoch(r, state);
  }

  for (std::size_t epoch = state.epochs_done + 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                      static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    auto order = train_windows;
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<std::size_t> kdist(config.k_min, config.k_max);
    std::vector<std::size_t> ks(order.size());
    for (auto& k : ks) k = kdist(rng);

    double loss_sum = 0.0;
    double grad_norm_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t nb = std::min(config.batch_size, order.size() - b0);
      std::vector<LossAndGrad> results(nb);
      parallel_for(nb, config.threads, [&](std::size_t i) {
        const auto& w = order[b0 + i];
        results[i] = loss_and_grad(window_model(dataset, w, state.params),
                                   window_frames(dataset, w, config.horizon), ks[b0 + i],
                                   config.horizon);
      });
      std::vector<double> g = flatten(results[0].grad);
      loss_sum += results[0].loss;
      for (std::size_t i = 1; i < nb; ++i) {
        const auto gi = flatten(results[i].grad);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += gi[j];
        loss_sum += results[i].loss;
      }
      double sq = 0.0;
      for (double& x : g) {
        x /= static_cast<double>(nb);
        sq += x * x;
      }
      grad_norm_sum += std::sqrt(sq);
      auto grads = results[0].grad;
      unflatten(g, grads);
      adam_step(state.adam, state.params, grads, config);
      ++batches;
    }

    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = loss_sum / static_cast<double>(order.size());
    r.grad_norm = grad_norm_sum / static_cast<double>(batches);
    r.adam_step = state.adam.step;
    r.radius = radius_of(state.params);
    r.radius_ok = !r.radius || *r.radius < 1.0;
    if (epoch % config.validate_every == 0 || epoch == config.epochs) {
      r.val_loss = mean_loss(dataset, state.params, selection_windows, config.val_k, config.horizon);
      // only contractive iterates are eligible
      if (r.radius_ok && *r.val_loss < state.best_val) {
        state.best_val = *r.val_loss;
        state.best = state.params;
        state.best_epoch = epoch;
      }
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.epochs_done = epoch;
    state.log.push_back(r);
    if (on_epoch) on_epoch(r, state);
  }

  TrainResult result{make_model(ref_problem, state.best), std::move(state)};
  return result;
}

}  // namespace nis::train
