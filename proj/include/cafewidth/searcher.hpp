#pragma once

// Width search on a trained supernet (max-max scoring, random and
// evolutionary search), the multi-stage driver, baselines and the ranking
// statistic.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cafewidth/archgraph.hpp"
#include "cafewidth/binplan.hpp"
#include "cafewidth/dataset.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/nnkernel.hpp"
#include "cafewidth/parallel.hpp"
#include "cafewidth/sharing.hpp"
#include "cafewidth/trainer.hpp"

namespace cafewidth {

struct EvoConfig {
  int population = 40;
  int generations = 50;
  double mutation = 0.1;
  double crossover = 0.5;
  double elite = 0.125;
  int tournament = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (population < 2) throw ConfigError("population must be >= 2");
    if (generations < 1) throw ConfigError("generations must be >= 1");
    for (double p : {mutation, crossover, elite}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("evolution probabilities must be in [0, 1]");
    }
    if (tournament < 1) throw ConfigError("tournament size must be >= 1");
  }
};

struct WidthScore {
  BinCounts bins;
  WidthVector widths;
  Flops flops = 0;
  double score = 0.0;
  int candidate = 0;  // argmax candidate, lowest index on ties
  std::vector<double> candidate_scores;
  bool feasible = true;
};

inline nlohmann::json to_json(const WidthScore& w) {
  return {{"bins", w.bins.values()},     {"widths", w.widths.values()}, {"flops", w.flops},
          {"score", w.score},            {"candidate", w.candidate},    {"candidate_scores", w.candidate_scores},
          {"feasible", w.feasible}};
}

/// Max-max validation accuracy of a width: the best candidate sub-network.
inline WidthScore evaluate_width(const SupernetState& state, const NetworkGraph& graph, const BinPlan& plan,
                                 const BinCounts& bins, int r, const CandidatePolicy& policy, const Dataset& val,
                                 int threads = 1) {
  if (val.size() == 0) throw DataError("validation set is empty");
  WidthScore out;
  out.bins = bins;
  out.widths = widths_from_bins(plan, bins);
  out.flops = network_flops(graph, out.widths);
  const auto cands = candidate_subnets(bins, plan, r, policy);
  out.candidate_scores.resize(cands.size());
  parallel_for(cands.size(), threads, [&](std::size_t k) {
    out.candidate_scores[k] = evaluate(state, graph, make_subnet(graph, cands[k], plan), val);
  });
  const auto best = std::max_element(out.candidate_scores.begin(), out.candidate_scores.end());
  out.candidate = static_cast<int>(best - out.candidate_scores.begin());
  out.score = *best;
  return out;
}

/// Memoizing scorer bound to one trained supernet.
class WidthEvaluator {
 public:
  WidthEvaluator(const SupernetState& state, const NetworkGraph& graph, const BinPlan& plan, int r,
                 CandidatePolicy policy, const Dataset& val, int threads = 1)
      : state_(state), graph_(graph), plan_(plan), r_(r), policy_(std::move(policy)), val_(val), threads_(threads) {}

  const NetworkGraph& graph() const { return graph_; }
  const BinPlan& plan() const { return plan_; }
  std::size_t evaluations() const { return memo_.size(); }

  Flops flops(const BinCounts& bins) const { return network_flops(graph_, widths_from_bins(plan_, bins)); }

  const WidthScore& score(const BinCounts& bins) {
    score_many({bins});
    return memo_.at(bins);
  }

  /// Scores every vector not seen before; independent widths run in parallel.
  void score_many(const std::vector<BinCounts>& all) {
    std::vector<BinCounts> todo;
    for (const auto& b : all) {
      if (!memo_.count(b) && std::find(todo.begin(), todo.end(), b) == todo.end()) todo.push_back(b);
    }
    std::vector<WidthScore> results(todo.size());
    parallel_for(todo.size(), threads_, [&](std::size_t i) {
      results[i] = evaluate_width(state_, graph_, plan_, todo[i], r_, policy_, val_, 1);
    });
    for (std::size_t i = 0; i < todo.size(); ++i) memo_.emplace(todo[i], std::move(results[i]));
  }

 private:
  const SupernetState& state_;
  const NetworkGraph& graph_;
  const BinPlan& plan_;
  int r_;
  CandidatePolicy policy_;
  const Dataset& val_;
  int threads_;
  std::map<BinCounts, WidthScore> memo_;
};

struct GenerationStat {
  int generation = 0;
  double best_score = 0.0;
  Flops best_flops = 0;
};

struct SearchResult {
  WidthScore best;
  Flops budget = 0;
  std::uint64_t seed = 0;
  std::vector<WidthScore> log;  // evaluation order, duplicates dropped
  std::vector<GenerationStat> generations;
};

inline nlohmann::json to_json(const SearchResult& r) {
  nlohmann::json log = nlohmann::json::array();
  for (const auto& w : r.log) log.push_back(to_json(w));
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& g : r.generations) {
    gens.push_back({{"generation", g.generation}, {"best_score", g.best_score}, {"best_flops", g.best_flops}});
  }
  return {{"best", to_json(r.best)}, {"budget", r.budget}, {"seed", r.seed}, {"log", log}, {"generations", gens}};
}

inline std::string generations_csv(const SearchResult& r) {
  std::string s = "generation,best_acc,best_flops\n";
  for (const auto& g : r.generations) {
    s += std::to_string(g.generation) + "," + nlohmann::json(g.best_score).dump() + "," + std::to_string(g.best_flops) +
         "\n";
  }
  return s;
}

namespace detail {

class SearchLog {
 public:
  SearchLog(WidthEvaluator& ev, Flops budget) : ev_(ev), budget_(budget) {}

  void add_many(const std::vector<BinCounts>& all) {
    ev_.score_many(all);
    for (const auto& b : all) record(ev_.score(b));
  }
  SearchResult finish(std::uint64_t seed) && {
    if (!best_) throw InfeasibleBudgetError("no width satisfied the FLOPs budget");
    result_.best = *best_;
    result_.budget = budget_;
    result_.seed = seed;
    return std::move(result_);
  }
  const std::optional<WidthScore>& best() const { return best_; }
  SearchResult& result() { return result_; }

 private:
  void record(const WidthScore& w) {
    if (!seen_.insert(w.bins).second) return;
    WidthScore entry = w;
    entry.feasible = w.flops <= budget_;
    result_.log.push_back(entry);
    if (entry.feasible && (!best_ || entry.score > best_->score)) best_ = entry;
  }

  WidthEvaluator& ev_;
  Flops budget_;
  std::set<BinCounts> seen_;
  std::optional<WidthScore> best_;
  SearchResult result_;
};

template <class Rng>
std::optional<BinCounts> sample_feasible(const WidthEvaluator& ev, Flops budget, Rng& rng, std::size_t attempts) {
  for (std::size_t a = 0; a < attempts; ++a) {
    BinCounts b = sample_bins(ev.plan(), rng);
    if (ev.flops(b) <= budget) return b;
  }
  return std::nullopt;
}

}  // namespace detail

/// N budget-feasible uniform samples (rejection, at most 100 N draws), each
/// scored max-max; best returned.
inline SearchResult random_search(WidthEvaluator& ev, Flops budget, int samples, std::uint64_t seed) {
  if (samples < 1) throw ConfigError("random search needs N >= 1");
  std::mt19937_64 rng(seed);
  detail::SearchLog log(ev, budget);
  const std::size_t cap = 100 * static_cast<std::size_t>(samples);
  std::size_t attempts = 0;
  int accepted = 0;
  std::vector<BinCounts> picks;
  while (accepted < samples && attempts < cap) {
    BinCounts b = sample_bins(ev.plan(), rng);
    ++attempts;
    if (ev.flops(b) > budget) continue;
    ++accepted;
    picks.push_back(std::move(b));
  }
  if (picks.empty()) {
    throw InfeasibleBudgetError("random search drew " + std::to_string(cap) + " widths and none met the budget of " +
                                std::to_string(budget) + " FLOPs");
  }
  log.add_many(picks);
  return std::move(log).finish(seed);
}

/// Shrinks a width until it fits the budget, each time taking one bin from the
/// group whose decrement saves the most FLOPs (first group on ties).
inline BinCounts repair_to_budget(const WidthEvaluator& ev, BinCounts b, Flops budget) {
  Flops f = ev.flops(b);
  while (f > budget) {
    std::optional<std::string> pick;
    Flops pick_flops = 0;
    for (const auto& g : ev.plan().groups()) {
      if (b.at(g.group) <= 1) continue;
      BinCounts t = b;
      t[g.group] -= 1;
      const Flops tf = ev.flops(t);
      if (!pick || tf < pick_flops) {
        pick = g.group;
        pick_flops = tf;
      }
    }
    if (!pick) throw InfeasibleBudgetError("budget is below the FLOPs of the minimum width");
    b[*pick] -= 1;
    f = pick_flops;
  }
  return b;
}

/// Generational search. G counts evaluated populations; the top elite share
/// survives unchanged, the rest are children of tournament-selected parents
/// (uniform crossover, per-group resampling mutation), repaired to the budget
/// and redrawn while they repeat an earlier width.
inline SearchResult evolutionary_search(WidthEvaluator& ev, Flops budget, const EvoConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution do_cross(config.crossover);
  std::bernoulli_distribution do_mutate(config.mutation);
  const auto& groups = ev.plan().groups();
  const auto pop_size = static_cast<std::size_t>(config.population);

  if (ev.flops(ev.plan().min_bins()) > budget) {
    throw InfeasibleBudgetError("budget of " + std::to_string(budget) + " FLOPs is below the minimum width");
  }
  // Widths already scored or queued are redrawn a bounded number of times, so
  // each generation spends its evaluations on new widths while small spaces
  // can still be exhausted.
  constexpr int kRedraws = 50;
  std::set<BinCounts> visited;
  std::vector<BinCounts> pop;
  while (pop.size() < pop_size) {
    BinCounts b;
    for (int a = 0; a < kRedraws; ++a) {
      auto s = detail::sample_feasible(ev, budget, rng, 100);
      b = s ? *s : repair_to_budget(ev, sample_bins(ev.plan(), rng), budget);
      if (!visited.count(b)) break;
    }
    visited.insert(b);
    pop.push_back(std::move(b));
  }

  detail::SearchLog log(ev, budget);
  for (int gen = 0;; ++gen) {
    log.add_many(pop);
    const auto& best = *log.best();
    log.result().generations.push_back({gen, best.score, best.flops});
    if (gen + 1 >= config.generations) break;

    std::vector<std::size_t> order(pop.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ev.score(pop[a]).score > ev.score(pop[b]).score; });
    auto tournament = [&]() -> const BinCounts& {
      std::size_t winner = order.size();
      for (int t = 0; t < config.tournament; ++t) {
        const auto pick = std::uniform_int_distribution<std::size_t>(0, pop.size() - 1)(rng);
        if (winner == order.size() || ev.score(pop[pick]).score > ev.score(pop[winner]).score) winner = pick;
      }
      return pop[winner];
    };

    std::vector<BinCounts> next;
    const auto elites = std::min(pop_size, static_cast<std::size_t>(std::llround(config.elite * static_cast<double>(pop_size))));
    for (std::size_t k = 0; k < elites; ++k) next.push_back(pop[order[k]]);
    while (next.size() < pop_size) {
      BinCounts child;
      for (int a = 0; a < kRedraws; ++a) {
        child = tournament();
        if (do_cross(rng)) {
          const BinCounts& other = tournament();
          for (const auto& g : groups) {
            if (coin(rng)) child[g.group] = other.at(g.group);
          }
        }
        for (const auto& g : groups) {
          if (do_mutate(rng)) child[g.group] = std::uniform_int_distribution<int>(1, g.bin_count())(rng);
        }
        child = repair_to_budget(ev, std::move(child), budget);
        if (!visited.count(child)) break;
      }
      visited.insert(child);
      next.push_back(std::move(child));
    }
    pop = std::move(next);
  }
  return std::move(log).finish(config.seed);
}

/// Every width of the plan scored; the reference optimum for small spaces.
inline SearchResult exhaustive_search(WidthEvaluator& ev, Flops budget) {
  detail::SearchLog log(ev, budget);
  log.add_many(enumerate_bin_vectors(ev.plan()));
  return std::move(log).finish(0);
}

// ---------------------------------------------------------------------------
// Retraining and baselines

struct RetrainResult {
  WidthVector widths;
  Flops flops = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

inline nlohmann::json to_json(const RetrainResult& r) {
  return {{"widths", r.widths.values()},
          {"flops", r.flops},
          {"val_accuracy", r.val_accuracy},
          {"test_accuracy", r.test_accuracy},
          {"epoch_loss", r.epoch_loss}};
}

/// Fresh standalone network at exactly `widths`, fully trained.
inline RetrainResult retrain_from_scratch(const NetworkGraph& graph, const WidthVector& widths,
                                          const TrainConfig& config, const DataSplits& data) {
  const NetworkGraph net = graph.with_max_widths(widths);
  auto tr = train_standalone(net, config, data.train);
  const Subnet full = make_subnet(net, fixed_channels(net.full_widths()));
  return {widths, network_flops(graph, widths), evaluate(tr.state, net, full, data.val),
          evaluate(tr.state, net, full, data.test), tr.epoch_loss};
}

struct UniformBaseline {
  double scale = 1.0;
  WidthVector widths;
  Flops flops = 0;
};

inline WidthVector uniform_widths(const NetworkGraph& graph, double s) {
  WidthVector w;
  for (const auto& g : graph.groups()) {
    w[g] = std::clamp(static_cast<int>(std::lround(s * graph.max_width(g))), 1, graph.max_width(g));
  }
  return w;
}

/// Largest common scale s in (0, 1] whose rounded widths fit the budget.
inline UniformBaseline uniform_baseline(const NetworkGraph& graph, Flops budget) {
  if (network_flops(graph, graph.min_widths()) > budget) {
    throw InfeasibleBudgetError("budget of " + std::to_string(budget) + " FLOPs is below the all-minimum width");
  }
  double lo = 0.0;
  double hi = 1.0;
  if (network_flops(graph, uniform_widths(graph, 1.0)) <= budget) {
    lo = 1.0;
  } else {
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (network_flops(graph, uniform_widths(graph, mid)) <= budget ? lo : hi) = mid;
    }
  }
  UniformBaseline out{lo, uniform_widths(graph, lo), 0};
  out.flops = network_flops(graph, out.widths);
  return out;
}

struct RandomBaselineResult {
  std::vector<RetrainResult> screened;  // after the short pre-training
  std::size_t chosen = 0;
  RetrainResult final;
};

/// Samples `candidates` feasible widths, trains each for `pre_epochs` epochs,
/// keeps the best on validation and continues it to config.epochs.
inline RandomBaselineResult random_baseline(const NetworkGraph& graph, const BinPlan& plan, Flops budget,
                                            const TrainConfig& config, int pre_epochs, int candidates,
                                            std::uint64_t seed, const DataSplits& data) {
  if (candidates < 1) throw ConfigError("random baseline needs >= 1 candidate");
  if (pre_epochs < 0 || pre_epochs > config.epochs) throw ConfigError("pre_epochs must be in [0, epochs]");
  std::mt19937_64 rng(seed);
  RandomBaselineResult out;
  std::vector<SupernetState> states;
  std::vector<NetworkGraph> nets;
  for (int k = 0; k < candidates; ++k) {
    std::optional<WidthVector> w;
    for (int a = 0; a < 100 * candidates && !w; ++a) {
      auto b = sample_bins(plan, rng);
      auto ww = widths_from_bins(plan, b);
      if (network_flops(graph, ww) <= budget) w = ww;
    }
    if (!w) throw InfeasibleBudgetError("random baseline found no width under the budget");
    nets.push_back(graph.with_max_widths(*w));
    const auto& net = nets.back();
    auto tr = train_standalone(SupernetState::initialize(net, config.seed), net, config, data.train, 0, pre_epochs);
    const Subnet full = make_subnet(net, fixed_channels(net.full_widths()));
    out.screened.push_back({*w, network_flops(graph, *w), evaluate(tr.state, net, full, data.val),
                            evaluate(tr.state, net, full, data.test), tr.epoch_loss});
    states.push_back(std::move(tr.state));
  }
  for (std::size_t k = 1; k < out.screened.size(); ++k) {
    if (out.screened[k].val_accuracy > out.screened[out.chosen].val_accuracy) out.chosen = k;
  }
  const auto& net = nets[out.chosen];
  auto tr = train_standalone(std::move(states[out.chosen]), net, config, data.train, pre_epochs, config.epochs);
  const Subnet full = make_subnet(net, fixed_channels(net.full_widths()));
  auto loss = out.screened[out.chosen].epoch_loss;
  loss.insert(loss.end(), tr.epoch_loss.begin(), tr.epoch_loss.end());
  out.final = {out.screened[out.chosen].widths, out.screened[out.chosen].flops, evaluate(tr.state, net, full, data.val),
               evaluate(tr.state, net, full, data.test), loss};
  return out;
}

// ---------------------------------------------------------------------------
// Multi-stage search

struct StageResult {
  int stage = 0;
  Rational beta;
  Flops budget = 0;
  BinPlan plan;
  NetworkGraph graph;
  std::vector<double> train_epoch_loss;
  SearchResult search;
};

struct MultiStageResult {
  std::vector<StageResult> stages;
  WidthScore best;
};

struct SearchSetup {
  TrainConfig train;
  EvoConfig evo;
  bool sensitive_bins = true;
  int uniform_bins = 10;  // bins per group when sensitive_bins is false
};

/// Stage s trains a fresh supernet whose maxima are the previous winner's
/// widths (the original maxima at s = 1), bins it with beta(s) and searches
/// under budget(s).
inline MultiStageResult multi_stage_search(const NetworkGraph& graph, const StageSchedule& schedule,
                                           const SearchSetup& setup, const DataSplits& data) {
  MultiStageResult out;
  NetworkGraph current = graph;
  for (int s = 1; s <= schedule.stages; ++s) {
    try {
      BinPlan plan = setup.sensitive_bins ? plan_bins(current, schedule.stage_beta(s))
                                          : plan_uniform_bins(current, setup.uniform_bins);
      TrainConfig tc = setup.train;
      tc.seed = mix_seed(setup.train.seed, static_cast<std::uint64_t>(s));
      auto trained = train_supernet(SupernetState::initialize(current, tc.seed), current, plan, tc, data.train);
      WidthEvaluator ev(trained.state, current, plan, tc.offset, tc.policy, data.val, tc.worker_count());
      EvoConfig evo = setup.evo;
      evo.seed = mix_seed(setup.evo.seed, static_cast<std::uint64_t>(s));
      auto result = evolutionary_search(ev, schedule.stage_budget(s), evo);
      out.stages.push_back({s, schedule.stage_beta(s), schedule.stage_budget(s), plan, current,
                            trained.epoch_loss, result});
      out.best = result.best;
      current = graph.with_max_widths(result.best.widths);
    } catch (const InfeasibleBudgetError& e) {
      throw InfeasibleBudgetError("stage " + std::to_string(s) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ranking

/// Kendall tau-b; pairs tied in both lists count in neither normalizer term.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("kendall_tau: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("kendall_tau: need at least two entries");
  long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) {
        ++tie_x;
      } else if (dy == 0) {
        ++tie_y;
      } else if ((dx > 0) == (dy > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double denom = std::sqrt(static_cast<double>(concordant + discordant + tie_x) *
                                 static_cast<double>(concordant + discordant + tie_y));
  if (denom == 0.0) return 0.0;
  return static_cast<double>(concordant - discordant) / denom;
}

/// Kendall tau between supernet max-max scores and oracle accuracies.
inline double rank_correlation(WidthEvaluator& ev, const std::vector<BinCounts>& widths,
                               const std::vector<double>& oracle_accs) {
  if (widths.size() != oracle_accs.size()) throw std::invalid_argument("rank_correlation: length mismatch");
  ev.score_many(widths);
  std::vector<double> scores;
  for (const auto& b : widths) scores.push_back(ev.score(b).score);
  return kendall_tau(scores, oracle_accs);
}

inline nlohmann::json to_json(const EvoConfig& c) {
  return {{"population", c.population}, {"generations", c.generations}, {"mutation", c.mutation},
          {"crossover", c.crossover},   {"elite", c.elite},             {"tournament", c.tournament},
          {"seed", c.seed}};
}

inline EvoConfig evo_config_from_json(const nlohmann::json& j, EvoConfig c = {}) {
  try {
    c.population = j.value("population", c.population);
    c.generations = j.value("generations", c.generations);
    c.mutation = j.value("mutation", c.mutation);
    c.crossover = j.value("crossover", c.crossover);
    c.elite = j.value("elite", c.elite);
    c.tournament = j.value("tournament", c.tournament);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("evo config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace cafewidth
