#pragma once

// Supernet training with min-min optimization, plus the plain trainers used
// by baselines and retraining.
//
// Two random streams are kept apart so runs can be replayed piecewise: the
// data order of epoch e depends only on (seed, e), and the width / candidate
// draws come from one generator seeded with `seed`.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cafewidth/binplan.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/nnkernel.hpp"
#include "cafewidth/parallel.hpp"
#include "cafewidth/sharing.hpp"

namespace cafewidth {

enum class LrSchedule { Cosine, Step };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr0 = 0.1;
  double lr_min = 0.0;
  LrSchedule schedule = LrSchedule::Cosine;
  int step_every = 10;  // epochs, step schedule only
  double step_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int offset = 1;
  CandidatePolicy policy;
  double warmup = 0.0;  // lambda: fraction of iterations trained on a random candidate
  std::uint64_t seed = 0;
  int threads = 0;  // 0: default_threads()
  bool reference = false;
  bool check_scan = false;  // hash the state around each candidate scan
  int checkpoint_every = 0;
  std::string checkpoint_dir;
  std::function<void(int epoch, const SupernetState&)> on_epoch;  // after each epoch

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
    if (lr_min < 0.0 || lr_min > lr0) throw ConfigError("lr_min must be in [0, lr0]");
    if (schedule == LrSchedule::Step && (step_every < 1 || step_gamma <= 0.0)) {
      throw ConfigError("step schedule needs step_every >= 1 and step_gamma > 0");
    }
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (offset < 0) throw ConfigError("offset r must be >= 0");
    if (!(warmup >= 0.0 && warmup <= 1.0)) throw ConfigError("warmup lambda must be in [0, 1]");
    if (policy.kind == CandidatePolicy::Kind::IndependentSampled && policy.samples < 1) {
      throw ConfigError("sampled policy needs M >= 1");
    }
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  }

  int worker_count() const { return reference ? 1 : (threads > 0 ? threads : default_threads()); }
  SgdParams sgd(double lr) const { return {lr, momentum, weight_decay}; }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Learning rate for `epoch` (0-based) of a run lasting config.epochs.
/// Cosine decays per iteration, step per epoch.
inline double learning_rate(const TrainConfig& c, int epoch, std::size_t iter_in_epoch, std::size_t iters_per_epoch) {
  if (c.schedule == LrSchedule::Step) return c.lr0 * std::pow(c.step_gamma, epoch / c.step_every);
  const double total = static_cast<double>(c.epochs) * static_cast<double>(iters_per_epoch);
  const double t = static_cast<double>(epoch) * static_cast<double>(iters_per_epoch) + static_cast<double>(iter_in_epoch);
  return c.lr_min + 0.5 * (c.lr0 - c.lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

/// Sample indices of epoch `epoch`, shuffled and cut into batches.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, int batch_size) {
  return (n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
}

/// One bin count per group, each uniform on [1, B_g].
template <class Rng>
BinCounts sample_bins(const BinPlan& plan, Rng& rng) {
  BinCounts b;
  for (const auto& g : plan.groups()) b[g.group] = std::uniform_int_distribution<int>(1, g.bin_count())(rng);
  return b;
}

template <class Rng>
WidthVector sample_width(const BinPlan& plan, Rng& rng) {
  return widths_from_bins(plan, sample_bins(plan, rng));
}

// ---------------------------------------------------------------------------
// Min-min step

/// Forward-only losses of every candidate. Read-only on `state`.
inline std::vector<double> candidate_losses(const SupernetState& state, const NetworkGraph& graph,
                                            const BinPlan& plan, const std::vector<AssignmentPattern>& candidates,
                                            const Batch& batch, int threads) {
  std::vector<double> losses(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t k) {
    losses[k] = masked_forward(state, graph, make_subnet(graph, candidates[k], plan), batch).loss;
  });
  return losses;
}

struct MinMinResult {
  int candidate = 0;
  double loss = 0.0;
  std::vector<double> losses;  // every candidate, pre-update
};

inline MinMinResult min_min_step(SupernetState& state, const NetworkGraph& graph, const BinCounts& bins,
                                 const BinPlan& plan, const TrainConfig& config, const Batch& batch, double lr) {
  const auto candidates = candidate_subnets(bins, plan, config.offset, config.policy);
  const std::uint64_t before = config.check_scan ? state.hash() : 0;
  MinMinResult r;
  r.losses = candidate_losses(state, graph, plan, candidates, batch, config.worker_count());
  if (config.check_scan && state.hash() != before) {
    throw TrainingError("candidate scan modified the supernet state");
  }
  r.candidate = static_cast<int>(std::min_element(r.losses.begin(), r.losses.end()) - r.losses.begin());
  r.loss = r.losses[static_cast<std::size_t>(r.candidate)];
  backward_and_step(state, graph, make_subnet(graph, candidates[static_cast<std::size_t>(r.candidate)], plan), batch,
                    config.sgd(lr));
  return r;
}

// ---------------------------------------------------------------------------
// Training log

struct TrainRecord {
  std::uint64_t iter = 0;
  int epoch = 0;
  WidthVector width;
  int candidate = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> candidate_losses;  // empty during warmup
};

inline nlohmann::json to_json(const TrainRecord& r) {
  nlohmann::json j{{"iter", r.iter}, {"epoch", r.epoch}, {"width", r.width.values()},
                   {"candidate", r.candidate}, {"loss", r.loss}, {"lr", r.lr}};
  if (!r.candidate_losses.empty()) j["candidate_losses"] = r.candidate_losses;
  return j;
}

struct TrainResult {
  SupernetState state;
  std::vector<TrainRecord> log;
  std::vector<double> epoch_loss;     // mean logged loss per epoch
  std::vector<double> epoch_seconds;  // wall clock
};

inline void write_jsonl(const std::string& path, const std::vector<TrainRecord>& log) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  for (const auto& r : log) os << to_json(r).dump() << '\n';
}

namespace detail {

// Shared epoch loop. `step` trains one batch and returns its record.
template <class Step>
TrainResult run_epochs(SupernetState state, const TrainConfig& config, const Dataset& data, int first_epoch,
                       int last_epoch, Step&& step) {
  config.validate();
  data.validate();
  if (data.size() == 0) throw DataError("training set is empty");
  TrainResult out;
  const std::size_t per_epoch = batches_per_epoch(data.size(), config.batch_size);
  std::uint64_t iter = static_cast<std::uint64_t>(first_epoch) * per_epoch;
  for (int e = first_epoch; e < last_epoch; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = epoch_batches(data.size(), config.batch_size, config.seed, e);
    double sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b, ++iter) {
      const Batch batch = data.subset(batches[b]);
      const double lr = learning_rate(config, e, b, per_epoch);
      TrainRecord rec;
      try {
        rec = step(state, batch, lr, iter);
      } catch (const TrainingError& err) {
        throw TrainingError(std::string(err.what()) + " at iteration " + std::to_string(iter), err.layer(),
                            static_cast<long long>(iter));
      }
      rec.iter = iter;
      rec.epoch = e;
      rec.lr = lr;
      sum += rec.loss;
      out.log.push_back(std::move(rec));
    }
    out.epoch_loss.push_back(sum / static_cast<double>(batches.size()));
    out.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (config.on_epoch) config.on_epoch(e, state);
    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() && (e + 1) % config.checkpoint_every == 0) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_checkpoint((std::filesystem::path(config.checkpoint_dir) / ("epoch" + std::to_string(e + 1) + ".ckpt")).string(),
                      state);
    }
  }
  out.state = std::move(state);
  return out;
}

}  // namespace detail

/// Trains `state` as a supernet over `plan`: every batch samples a width, the
/// first lambda share of iterations updates a uniformly drawn candidate, the
/// rest run min_min_step.
inline TrainResult train_supernet(SupernetState state, const NetworkGraph& graph, const BinPlan& plan,
                                  const TrainConfig& config, const Dataset& train) {
  config.validate();
  const std::size_t per_epoch = batches_per_epoch(train.size(), config.batch_size);
  const auto warmup_iters = static_cast<std::uint64_t>(
      std::floor(config.warmup * static_cast<double>(per_epoch) * static_cast<double>(config.epochs)));
  std::mt19937_64 rng(config.seed);
  return detail::run_epochs(std::move(state), config, train, 0, config.epochs,
                            [&](SupernetState& st, const Batch& batch, double lr, std::uint64_t iter) {
                              TrainRecord rec;
                              const BinCounts bins = sample_bins(plan, rng);
                              rec.width = widths_from_bins(plan, bins);
                              if (iter < warmup_iters) {
                                const auto cands = candidate_subnets(bins, plan, config.offset, config.policy);
                                std::size_t k = 0;
                                if (cands.size() > 1) {
                                  k = std::uniform_int_distribution<std::size_t>(0, cands.size() - 1)(rng);
                                }
                                rec.candidate = static_cast<int>(k);
                                rec.loss = backward_and_step(st, graph, make_subnet(graph, cands[k], plan), batch,
                                                             config.sgd(lr));
                              } else {
                                auto r = min_min_step(st, graph, bins, plan, config, batch, lr);
                                rec.candidate = r.candidate;
                                rec.loss = r.loss;
                                rec.candidate_losses = std::move(r.losses);
                              }
                              return rec;
                            });
}

/// Supernet training without free channels: each batch samples a width and
/// updates its left-prefix sub-network.
inline TrainResult train_fixed_pattern(SupernetState state, const NetworkGraph& graph, const BinPlan& plan,
                                       const TrainConfig& config, const Dataset& train) {
  std::mt19937_64 rng(config.seed);
  return detail::run_epochs(std::move(state), config, train, 0, config.epochs,
                            [&](SupernetState& st, const Batch& batch, double lr, std::uint64_t) {
                              TrainRecord rec;
                              rec.width = widths_from_bins(plan, sample_bins(plan, rng));
                              rec.loss = backward_and_step(st, graph, fixed_channels(rec.width), batch, config.sgd(lr));
                              return rec;
                            });
}

/// Plain training of one network at full width, epochs [first, last) of a
/// schedule spanning config.epochs. Splitting a run into consecutive ranges
/// gives the same result as one call over the whole range.
inline TrainResult train_standalone(SupernetState state, const NetworkGraph& graph, const TrainConfig& config,
                                    const Dataset& train, int first_epoch, int last_epoch) {
  if (first_epoch < 0 || last_epoch > config.epochs || first_epoch > last_epoch) {
    throw ConfigError("epoch range out of bounds");
  }
  const Subnet full = make_subnet(graph, fixed_channels(graph.full_widths()));
  const WidthVector width = graph.full_widths();
  return detail::run_epochs(std::move(state), config, train, first_epoch, last_epoch,
                            [&](SupernetState& st, const Batch& batch, double lr, std::uint64_t) {
                              TrainRecord rec;
                              rec.width = width;
                              rec.loss = backward_and_step(st, graph, full, batch, config.sgd(lr));
                              return rec;
                            });
}

inline TrainResult train_standalone(const NetworkGraph& graph, const TrainConfig& config, const Dataset& train) {
  return train_standalone(SupernetState::initialize(graph, config.seed), graph, config, train, 0, config.epochs);
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"lr_min", c.lr_min},
          {"schedule", c.schedule == LrSchedule::Cosine ? "cosine" : "step"},
          {"step_every", c.step_every},
          {"step_gamma", c.step_gamma},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"offset", c.offset},
          {"policy", c.policy.to_string()},
          {"warmup", c.warmup},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_min = j.value("lr_min", c.lr_min);
    const std::string sched = j.value("schedule", std::string(c.schedule == LrSchedule::Cosine ? "cosine" : "step"));
    if (sched == "cosine") {
      c.schedule = LrSchedule::Cosine;
    } else if (sched == "step") {
      c.schedule = LrSchedule::Step;
    } else {
      throw ConfigError("unknown lr schedule '" + sched + "'");
    }
    c.step_every = j.value("step_every", c.step_every);
    c.step_gamma = j.value("step_gamma", c.step_gamma);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.offset = j.value("offset", c.offset);
    if (j.contains("policy")) c.policy = CandidatePolicy::parse(j.at("policy").get<std::string>());
    c.warmup = j.value("warmup", c.warmup);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace cafewidth
