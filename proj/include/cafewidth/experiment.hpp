#pragma once

// Experiment harness: configuration, command runners, result / manifest /
// timing documents. Every runner returns a JSON document that depends only on
// the resolved configuration, so rerunning from a manifest in reference mode
// reproduces it byte for byte. Wall-clock numbers go to a separate document.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cafewidth/archgraph.hpp"
#include "cafewidth/binplan.hpp"
#include "cafewidth/dataset.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/searcher.hpp"
#include "cafewidth/trainer.hpp"

#ifndef CAFEWIDTH_VERSION
#define CAFEWIDTH_VERSION "0.0.0"
#endif

namespace cafewidth {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = CAFEWIDTH_VERSION;

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitInfeasible = 4,
  kExitData = 5,
  kExitTraining = 6,
  kExitCheckpoint = 7,
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidGraph:
    case ErrorKind::InvalidWidth:
    case ErrorKind::EmptyPlan:
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::InfeasibleBudget: return kExitInfeasible;
    case ErrorKind::Data: return kExitData;
    case ErrorKind::Training: return kExitTraining;
    case ErrorKind::Checkpoint: return kExitCheckpoint;
  }
  return kExitOther;
}

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSpec {
  std::string kind = "striped-patches";  // striped-patches | gaussian-blobs | csv | binary
  std::string path;
  int samples = 1000;
  int classes = 3;
  int dims = 4;
  double noise = -1.0;  // generator default when negative
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  json resolved;  // the configuration after overrides, with absolute paths
  std::string arch_path;
  json arch;  // inline architecture when no path is given
  DatasetSpec dataset;
  std::uint64_t split_seed = 0;
  TrainConfig train;     // standalone training: retrains and baselines
  TrainConfig supernet;  // supernet training; "supernet" entries override "train"
  EvoConfig evo;
  int stages = 1;
  Rational beta0{1};
  Rational alpha{2};
  std::optional<double> budget_fraction = 0.5;
  std::optional<Flops> budget_flops;
  std::string bin_method = "sensitive";  // sensitive | uniform
  int bins_per_group = 8;
  std::vector<std::uint64_t> seeds{0};
  int random_samples = 2000;
  int random_candidates = 20;
  int random_pre_epochs = 1;
  bool retrain_winner = true;
  std::vector<int> ablate_r{0, 1, 2, 3};
  std::vector<double> ablate_lambda{0.0, 0.25, 0.5, 0.75, 1.0};
  int rank_bins = 4;
  std::vector<int> rank_offsets{0, 1};
  std::vector<std::map<std::string, int>> widths;  // retrain targets
  bool reference = false;

  int threads() const { return reference ? 1 : default_threads(); }
};

namespace detail {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

inline std::string absolute_from(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path path(p);
  return (path.is_absolute() ? path : (base / path)).lexically_normal().string();
}

}  // namespace detail

/// Parses a configuration document. Relative paths are resolved against
/// `base_dir` and written back into `resolved` as absolute paths.
inline ExperimentConfig parse_config(json j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  ExperimentConfig c;
  using detail::get_or;

  if (j.contains("arch")) {
    if (j["arch"].is_string()) {
      c.arch_path = detail::absolute_from(base_dir, j["arch"].get<std::string>());
      if (!fs::exists(c.arch_path)) throw ConfigError("architecture file '" + c.arch_path + "' does not exist");
      j["arch"] = c.arch_path;
    } else if (j["arch"].is_object()) {
      c.arch = j["arch"];
    } else {
      throw ConfigError("'arch' must be a path or an object");
    }
  } else {
    throw ConfigError("config needs an 'arch' entry");
  }

  const json ds = get_or<json>(j, "dataset", json::object());
  c.dataset.kind = get_or<std::string>(ds, "kind", c.dataset.kind);
  c.dataset.samples = get_or(ds, "samples", c.dataset.samples);
  c.dataset.classes = get_or(ds, "classes", c.dataset.classes);
  c.dataset.dims = get_or(ds, "dims", c.dataset.dims);
  c.dataset.noise = get_or(ds, "noise", c.dataset.noise);
  c.dataset.seed = get_or(ds, "seed", c.dataset.seed);
  if (c.dataset.kind == "csv" || c.dataset.kind == "binary") {
    c.dataset.path = detail::absolute_from(base_dir, get_or<std::string>(ds, "path", ""));
    if (c.dataset.path.empty() || !fs::exists(c.dataset.path)) {
      throw ConfigError("dataset file '" + c.dataset.path + "' does not exist");
    }
    j["dataset"]["path"] = c.dataset.path;
  } else if (c.dataset.kind != "striped-patches" && c.dataset.kind != "gaussian-blobs") {
    throw ConfigError("unknown dataset kind '" + c.dataset.kind + "'");
  }
  c.split_seed = get_or(j, "split_seed", c.split_seed);

  c.train = train_config_from_json(get_or<json>(j, "train", json::object()));
  c.supernet = train_config_from_json(get_or<json>(j, "supernet", json::object()), c.train);
  c.evo = evo_config_from_json(get_or<json>(j, "evo", json::object()));

  const json sch = get_or<json>(j, "schedule", json::object());
  c.stages = get_or(sch, "stages", c.stages);
  if (sch.contains("beta0")) c.beta0 = sch["beta0"].get<Rational>();
  if (sch.contains("alpha")) c.alpha = sch["alpha"].get<Rational>();
  if (sch.contains("budget_flops") && sch.contains("budget_fraction")) {
    throw ConfigError("schedule sets both budget_flops and budget_fraction");
  }
  if (sch.contains("budget_flops")) {
    c.budget_flops = get_or<Flops>(sch, "budget_flops", 0);
    c.budget_fraction.reset();
  }
  if (sch.contains("budget_fraction")) {
    c.budget_fraction = get_or<double>(sch, "budget_fraction", 0.5);
    c.budget_flops.reset();
  }
  if (c.budget_fraction && !(*c.budget_fraction > 0.0 && *c.budget_fraction <= 1.0)) {
    throw ConfigError("budget_fraction must be in (0, 1]");
  }
  if (c.stages < 1) throw ConfigError("schedule.stages must be >= 1");

  c.supernet.offset = get_or(j, "offset", c.supernet.offset);
  if (j.contains("policy")) c.supernet.policy = CandidatePolicy::parse(get_or<std::string>(j, "policy", "shared"));

  const json bins = get_or<json>(j, "bins", json::object());
  c.bin_method = get_or<std::string>(bins, "method", c.bin_method);
  c.bins_per_group = get_or(bins, "per_group", c.bins_per_group);
  if (c.bin_method != "sensitive" && c.bin_method != "uniform") {
    throw ConfigError("bins.method must be 'sensitive' or 'uniform'");
  }
  if (c.bins_per_group < 1) throw ConfigError("bins.per_group must be >= 1");

  c.seeds = get_or(j, "seeds", c.seeds);
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  c.random_samples = get_or(j, "random_search_samples", c.random_samples);
  const json rb = get_or<json>(j, "random_baseline", json::object());
  c.random_candidates = get_or(rb, "candidates", c.random_candidates);
  c.random_pre_epochs = get_or(rb, "pre_epochs", c.random_pre_epochs);
  c.retrain_winner = get_or(j, "retrain_winner", c.retrain_winner);
  c.ablate_r = get_or(j, "ablate_r", c.ablate_r);
  c.ablate_lambda = get_or(j, "ablate_lambda", c.ablate_lambda);
  const json rc = get_or<json>(j, "rank_corr", json::object());
  c.rank_bins = get_or(rc, "bins_per_group", c.rank_bins);
  c.rank_offsets = get_or(rc, "offsets", c.rank_offsets);
  c.widths = get_or(j, "widths", c.widths);
  c.reference = get_or(j, "reference", c.reference);
  c.train.reference = c.reference;
  c.supernet.reference = c.reference;
  c.resolved = std::move(j);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(std::move(j), fs::absolute(path).parent_path());
}

inline NetworkGraph load_arch(const ExperimentConfig& c) {
  return c.arch_path.empty() ? graph_from_json(c.arch) : load_graph(c.arch_path);
}

inline Dataset load_dataset(const DatasetSpec& d) {
  if (d.kind == "csv") return load_csv(d.path);
  if (d.kind == "binary") return load_binary(d.path);
  if (d.kind == "gaussian-blobs") {
    return gaussian_blobs(d.classes, d.dims, d.samples, d.seed, d.noise < 0 ? 1.0 : d.noise);
  }
  return striped_patches(d.samples, d.seed, d.noise < 0 ? 0.6 : d.noise);
}

inline Flops final_budget(const ExperimentConfig& c, const NetworkGraph& g) {
  const Flops f0 = supernet_flops(g);
  if (c.budget_flops) return *c.budget_flops;
  return static_cast<Flops>(std::floor(*c.budget_fraction * static_cast<double>(f0)));
}

inline BinPlan make_plan(const ExperimentConfig& c, const NetworkGraph& g, const Rational& beta,
                         const std::string& method) {
  return method == "uniform" ? plan_uniform_bins(g, c.bins_per_group) : plan_bins(g, beta);
}

// ---------------------------------------------------------------------------
// Runs

struct Timing {
  json entries = json::array();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void add(json entry) { entries.push_back(std::move(entry)); }
  json document(const std::string& command) const {
    return {{"command", command},
            {"total_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
            {"entries", entries}};
  }
};

struct Outputs {
  fs::path dir;
  std::vector<std::pair<std::string, std::string>> files;  // extra artefacts: name, contents

  void add(std::string name, std::string contents) { files.emplace_back(std::move(name), std::move(contents)); }
};

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)), graph_(load_arch(cfg_)) {}

  const ExperimentConfig& config() const { return cfg_; }
  const NetworkGraph& graph() const { return graph_; }
  /// Loaded on first use; commands that only inspect the graph never touch it.
  const DataSplits& data() {
    if (!data_) {
      auto d = split_dataset(load_dataset(cfg_.dataset), cfg_.split_seed);
      if (d.train.channels != graph_.input_channels() || d.train.height != graph_.input_h() ||
          d.train.width != graph_.input_w()) {
        throw DataError("dataset shape " + std::to_string(d.train.channels) + "x" + std::to_string(d.train.height) +
                        "x" + std::to_string(d.train.width) + " does not match the architecture input");
      }
      if (d.train.num_classes != graph_.num_classes()) {
        throw DataError("dataset has " + std::to_string(d.train.num_classes) + " classes, architecture expects " +
                        std::to_string(graph_.num_classes()));
      }
      data_ = std::move(d);
    }
    return *data_;
  }
  Timing& timing() { return timing_; }
  Outputs& outputs() { return outputs_; }

  TrainConfig train_config(std::uint64_t seed) const { return seeded(cfg_.train, seed); }
  TrainConfig supernet_config(std::uint64_t seed) const { return seeded(cfg_.supernet, seed); }
  EvoConfig evo_config(std::uint64_t seed) const {
    EvoConfig e = cfg_.evo;
    e.seed = seed;
    return e;
  }

  json plan_bins_cmd() const {
    const auto sched = schedule();
    json stages = json::array();
    for (int s = 1; s <= sched.stages; ++s) {
      stages.push_back({{"stage", s}, {"beta", sched.stage_beta(s)}, {"budget", sched.stage_budget(s)},
                        {"plan", to_json(make_plan(cfg_, graph_, sched.stage_beta(s), cfg_.bin_method))}});
    }
    json eps = json::object();
    for (const auto& g : graph_.groups()) eps[g] = sensitivity(graph_, g);
    return {{"method", cfg_.bin_method}, {"sensitivity", eps}, {"schedule", to_json(sched)}, {"stages", stages}};
  }

  json analyze_space_cmd() const {
    const auto sched = schedule();
    std::vector<BinPlan> plans;
    json per_stage = json::array();
    for (int s = 1; s <= sched.stages; ++s) {
      plans.push_back(make_plan(cfg_, graph_, sched.stage_beta(s), cfg_.bin_method));
      const auto size = search_space_size({plans.back()});
      json bins = json::object();
      for (const auto& g : plans.back().groups()) bins[g.group] = g.bin_count();
      per_stage.push_back({{"stage", s}, {"bins", bins}, {"size", size.str()}});
    }
    const auto total = search_space_size(plans);
    return {{"search_space_size", total.str()}, {"scientific", to_scientific(total)}, {"stages", per_stage}};
  }

  json train_cmd() {
    json runs = json::array();
    const auto plan = make_plan(cfg_, graph_, cfg_.beta0, cfg_.bin_method);
    for (auto seed : cfg_.seeds) {
      auto tr = train(plan, supernet_config(seed), "train");
      const std::string ckpt = "supernet_seed" + std::to_string(seed) + ".ckpt";
      if (!outputs_.dir.empty()) save_checkpoint((outputs_.dir / ckpt).string(), tr.state);
      std::string log;
      for (const auto& r : tr.log) log += to_json(r).dump() + "\n";
      outputs_.add("train_log_seed" + std::to_string(seed) + ".jsonl", log);
      const Subnet full = make_subnet(graph_, fixed_channels(graph_.full_widths()));
      runs.push_back({{"seed", seed},
                      {"epoch_loss", tr.epoch_loss},
                      {"full_width_val_accuracy", evaluate(tr.state, graph_, full, data().val)},
                      {"checkpoint", ckpt},
                      {"state_hash", fnv1a_hex(std::to_string(tr.state.hash()))}});
    }
    return {{"runs", runs}};
  }

  json search_cmd(const std::string& method) {
    if (method != "random" && method != "evo") throw ConfigError("search method must be 'random' or 'evo'");
    json runs = json::array();
    const Flops budget = final_budget(cfg_, graph_);
    const auto plan = make_plan(cfg_, graph_, cfg_.beta0, cfg_.bin_method);
    for (auto seed : cfg_.seeds) {
      const auto res = train_and_search(plan, budget, method, seed, cfg_.supernet.offset, cfg_.supernet.warmup);
      json run{{"seed", seed}, {"search", to_json(res)}};
      if (method == "evo") outputs_.add("generations_seed" + std::to_string(seed) + ".csv", generations_csv(res));
      if (cfg_.retrain_winner) run["retrain"] = to_json(retrain(res.best.widths, seed));
      runs.push_back(std::move(run));
    }
    return {{"method", method}, {"budget", budget}, {"runs", runs}};
  }

  json multi_stage_cmd() {
    json runs = json::array();
    const auto sched = schedule();
    for (auto seed : cfg_.seeds) {
      SearchSetup setup{supernet_config(seed), evo_config(seed), cfg_.bin_method == "sensitive", cfg_.bins_per_group};
      const auto t0 = std::chrono::steady_clock::now();
      const auto ms = multi_stage_search(graph_, sched, setup, data());
      timing_.add({{"seed", seed}, {"phase", "multi-stage"}, {"seconds", seconds_since(t0)}});
      json stages = json::array();
      for (const auto& st : ms.stages) {
        outputs_.add("generations_seed" + std::to_string(seed) + "_stage" + std::to_string(st.stage) + ".csv",
                     generations_csv(st.search));
        stages.push_back({{"stage", st.stage},
                          {"beta", st.beta},
                          {"budget", st.budget},
                          {"max_widths", st.graph.full_widths().values()},
                          {"plan", to_json(st.plan)},
                          {"train_epoch_loss", st.train_epoch_loss},
                          {"best", to_json(st.search.best)}});
      }
      json run{{"seed", seed}, {"stages", stages}, {"best", to_json(ms.best)}};
      if (cfg_.retrain_winner) run["retrain"] = to_json(retrain(ms.best.widths, seed));
      runs.push_back(std::move(run));
    }
    return {{"schedule", to_json(sched)}, {"runs", runs}};
  }

  json retrain_cmd() {
    if (cfg_.widths.empty()) throw ConfigError("retrain needs a non-empty 'widths' list");
    json runs = json::array();
    for (auto seed : cfg_.seeds) {
      for (const auto& w : cfg_.widths) {
        WidthVector wv;
        for (const auto& [g, c] : w) wv[g] = c;
        check_widths(graph_, wv);
        runs.push_back({{"seed", seed}, {"retrain", to_json(retrain(wv, seed))}});
      }
    }
    return {{"runs", runs}};
  }

  json baseline_cmd(const std::string& kind) {
    const Flops budget = final_budget(cfg_, graph_);
    json runs = json::array();
    if (kind == "uniform") {
      const auto u = uniform_baseline(graph_, budget);
      for (auto seed : cfg_.seeds) runs.push_back({{"seed", seed}, {"retrain", to_json(retrain(u.widths, seed))}});
      return {{"kind", kind}, {"budget", budget}, {"scale", u.scale}, {"widths", u.widths.values()},
              {"flops", u.flops}, {"runs", runs}};
    }
    if (kind != "random") throw ConfigError("baseline must be 'uniform' or 'random'");
    const auto plan = make_plan(cfg_, graph_, cfg_.beta0, cfg_.bin_method);
    for (auto seed : cfg_.seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto rb = random_baseline(graph_, plan, budget, train_config(seed), cfg_.random_pre_epochs,
                                      cfg_.random_candidates, seed, data());
      timing_.add({{"seed", seed}, {"phase", "random-baseline"}, {"seconds", seconds_since(t0)}});
      json screened = json::array();
      for (const auto& s : rb.screened) screened.push_back(to_json(s));
      runs.push_back({{"seed", seed}, {"screened", screened}, {"chosen", rb.chosen}, {"final", to_json(rb.final)}});
    }
    return {{"kind", kind}, {"budget", budget}, {"runs", runs}};
  }

  /// One row per (value, seed): supernet trained with the swept setting,
  /// evolutionary search at the final budget, optional retrain.
  json ablate_cmd(const std::string& what, const std::string& bin_method = "") {
    const Flops budget = final_budget(cfg_, graph_);
    json rows = json::array();
    std::string csv;
    auto row = [&](const std::string& key, json value, const BinPlan& plan, int r, double lambda, std::uint64_t seed) {
      const auto res = train_and_search(plan, budget, "evo", seed, r, lambda);
      json out{{key, value},
               {"seed", seed},
               {"search_space_size", search_space_size({plan}).str()},
               {"best_score", res.best.score},
               {"best_widths", res.best.widths.values()},
               {"best_flops", res.best.flops}};
      std::string test = "";
      if (cfg_.retrain_winner) {
        const auto rt = retrain(res.best.widths, seed);
        out["retrain_test_accuracy"] = rt.test_accuracy;
        test = json(rt.test_accuracy).dump();
      }
      csv += value.dump() + "," + std::to_string(seed) + "," + json(res.best.score).dump() + "," +
             std::to_string(res.best.flops) + "," + test + "\n";
      rows.push_back(std::move(out));
    };
    if (what == "r") {
      csv = "r,seed,best_score,best_flops,retrain_test_accuracy\n";
      const auto plan = make_plan(cfg_, graph_, cfg_.beta0, cfg_.bin_method);
      for (int r : cfg_.ablate_r) {
        if (r < 0) throw ConfigError("ablate_r values must be >= 0");
        for (auto seed : cfg_.seeds) row("r", r, plan, r, cfg_.supernet.warmup, seed);
      }
    } else if (what == "lambda") {
      csv = "lambda,seed,best_score,best_flops,retrain_test_accuracy\n";
      const auto plan = make_plan(cfg_, graph_, cfg_.beta0, cfg_.bin_method);
      for (double l : cfg_.ablate_lambda) {
        if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("ablate_lambda values must be in [0, 1]");
        for (auto seed : cfg_.seeds) row("lambda", l, plan, cfg_.supernet.offset, l, seed);
      }
    } else if (what == "bins") {
      if (bin_method != "uniform" && bin_method != "sensitive") {
        throw ConfigError("ablate-bins needs 'uniform' or 'sensitive'");
      }
      csv = "method,seed,best_score,best_flops,retrain_test_accuracy\n";
      const auto plan = make_plan(cfg_, graph_, cfg_.beta0, bin_method);
      for (auto seed : cfg_.seeds) row("method", bin_method, plan, cfg_.supernet.offset, cfg_.supernet.warmup, seed);
    } else {
      throw ConfigError("unknown ablation '" + what + "'");
    }
    outputs_.add("ablation.csv", csv);
    return {{"ablation", what}, {"budget", budget}, {"rows", rows}};
  }

  /// Mini-space ranking study: every width of a uniform K-bin plan is trained
  /// from scratch (oracle test accuracy), then one supernet per offset ranks
  /// them by max-max validation score.
  json rank_corr_cmd() {
    const auto plan = plan_uniform_bins(graph_, cfg_.rank_bins);
    const auto widths = enumerate_bin_vectors(plan, 4096);
    json runs = json::array();
    for (auto seed : cfg_.seeds) {
      std::vector<double> oracle;
      for (const auto& b : widths) oracle.push_back(retrain(widths_from_bins(plan, b), seed).test_accuracy);
      json taus = json::object();
      json scores = json::object();
      for (int r : cfg_.rank_offsets) {
        TrainConfig tc = supernet_config(seed);
        tc.offset = r;
        auto tr = train(plan, tc, "rank-corr r=" + std::to_string(r));
        WidthEvaluator ev(tr.state, graph_, plan, r, tc.policy, data().val, cfg_.threads());
        taus[std::to_string(r)] = rank_correlation(ev, widths, oracle);
        std::vector<double> s;
        for (const auto& b : widths) s.push_back(ev.score(b).score);
        scores[std::to_string(r)] = s;
      }
      json wl = json::array();
      for (const auto& b : widths) wl.push_back(widths_from_bins(plan, b).values());
      runs.push_back({{"seed", seed}, {"widths", wl}, {"oracle", oracle}, {"scores", scores}, {"tau", taus}});
    }
    return {{"bins_per_group", cfg_.rank_bins}, {"runs", runs}};
  }

  StageSchedule schedule() const {
    return make_schedule(supernet_flops(graph_), final_budget(cfg_, graph_), cfg_.stages, cfg_.beta0, cfg_.alpha);
  }

 private:
  TrainConfig seeded(TrainConfig t, std::uint64_t seed) const {
    t.seed = seed;
    t.reference = cfg_.reference;
    t.threads = cfg_.threads();
    return t;
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  TrainResult train(const BinPlan& plan, const TrainConfig& tc, const std::string& phase) {
    auto tr = train_supernet(SupernetState::initialize(graph_, tc.seed), graph_, plan, tc, data().train);
    timing_.add({{"seed", tc.seed}, {"phase", phase}, {"epoch_seconds", tr.epoch_seconds}});
    return tr;
  }

  SearchResult train_and_search(const BinPlan& plan, Flops budget, const std::string& method, std::uint64_t seed,
                                int r, double lambda) {
    TrainConfig tc = supernet_config(seed);
    tc.offset = r;
    tc.warmup = lambda;
    auto tr = train(plan, tc, "supernet");
    const auto t0 = std::chrono::steady_clock::now();
    WidthEvaluator ev(tr.state, graph_, plan, r, tc.policy, data().val, cfg_.threads());
    auto res = method == "random" ? random_search(ev, budget, cfg_.random_samples, seed)
                                  : evolutionary_search(ev, budget, evo_config(seed));
    timing_.add({{"seed", seed}, {"phase", "search-" + method}, {"seconds", seconds_since(t0)}});
    return res;
  }

  RetrainResult retrain(const WidthVector& w, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = retrain_from_scratch(graph_, w, train_config(seed), data());
    timing_.add({{"seed", seed}, {"phase", "retrain"}, {"seconds", seconds_since(t0)}});
    return r;
  }

  ExperimentConfig cfg_;
  NetworkGraph graph_;
  std::optional<DataSplits> data_;
  Timing timing_;
  Outputs outputs_;
};

/// Runs `command` (e.g. {"search", "evo"}) and returns the result document.
inline json run_command(Experiment& ex, const std::vector<std::string>& command) {
  if (command.empty()) throw ConfigError("no command given");
  const std::string& name = command[0];
  auto arg = [&](std::size_t i) -> std::string {
    if (command.size() <= i) throw ConfigError("command '" + name + "' needs an argument");
    return command[i];
  };
  json results;
  if (name == "plan-bins") {
    results = ex.plan_bins_cmd();
  } else if (name == "analyze-space") {
    results = ex.analyze_space_cmd();
  } else if (name == "train") {
    results = ex.train_cmd();
  } else if (name == "search") {
    results = ex.search_cmd(arg(1));
  } else if (name == "multi-stage") {
    results = ex.multi_stage_cmd();
  } else if (name == "retrain") {
    results = ex.retrain_cmd();
  } else if (name == "baseline") {
    results = ex.baseline_cmd(arg(1));
  } else if (name == "ablate-r") {
    results = ex.ablate_cmd("r");
  } else if (name == "ablate-lambda") {
    results = ex.ablate_cmd("lambda");
  } else if (name == "ablate-bins") {
    results = ex.ablate_cmd("bins", arg(1));
  } else if (name == "rank-corr") {
    results = ex.rank_corr_cmd();
  } else {
    throw ConfigError("unknown command '" + name + "'");
  }
  std::string joined;
  for (const auto& part : command) joined += (joined.empty() ? "" : " ") + part;
  return {{"command", joined},
          {"version", kVersion},
          {"config_hash", fnv1a_hex(ex.config().resolved.dump())},
          {"seeds", ex.config().seeds},
          {"results", results}};
}

inline json make_manifest(const ExperimentConfig& cfg, const std::vector<std::string>& command) {
  return {{"version", kVersion},
          {"command", command},
          {"config_hash", fnv1a_hex(cfg.resolved.dump())},
          {"seeds", cfg.seeds},
          {"reference", cfg.reference},
          {"threads", cfg.threads()},
          {"config", cfg.resolved}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  os << text;
}

}  // namespace cafewidth
