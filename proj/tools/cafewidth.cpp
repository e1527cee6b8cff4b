#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cafewidth/experiment.hpp"

namespace {

using cafewidth::json;
namespace fs = std::filesystem;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool reference = false;
  std::string out;
  std::optional<double> budget_fraction;
  std::optional<int> stages;
  std::optional<int> offset;
  std::optional<std::string> policy;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run a single seed instead of the config's list");
  cmd->add_flag("--reference", o.reference, "single-threaded, bit-reproducible run");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--budget-fraction", o.budget_fraction, "target FLOPs as a fraction of the supernet");
  cmd->add_option("--stages", o.stages, "number of search stages");
  cmd->add_option("--offset", o.offset, "offset r of the locally free pattern");
  cmd->add_option("--policy", o.policy, "candidate policy: shared | sampled:M");
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw cafewidth::ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw cafewidth::ConfigError("'" + path + "': " + e.what());
  }
}

// Flags become part of the resolved config, so the manifest replays them.
json apply_overrides(json j, const Overrides& o) {
  if (o.seed) j["seeds"] = json::array({*o.seed});
  if (o.reference) j["reference"] = true;
  if (o.budget_fraction) {
    j["schedule"]["budget_fraction"] = *o.budget_fraction;
    if (j["schedule"].contains("budget_flops")) j["schedule"].erase("budget_flops");
  }
  if (o.stages) j["schedule"]["stages"] = *o.stages;
  if (o.offset) j["offset"] = *o.offset;
  if (o.policy) j["policy"] = *o.policy;
  return j;
}

void emit(cafewidth::Experiment& ex, const std::vector<std::string>& command, const std::string& out) {
  if (!out.empty()) {
    fs::create_directories(out);
    ex.outputs().dir = fs::absolute(out);
  }
  const json result = cafewidth::run_command(ex, command);
  if (command[0] == "analyze-space") {
    std::cout << result["results"]["search_space_size"].get<std::string>() << "\n"
              << result["results"]["scientific"].get<std::string>() << "\n";
  }
  if (out.empty()) {
    if (command[0] != "analyze-space") std::cout << result.dump(2) << "\n";
    return;
  }
  const fs::path dir(out);
  cafewidth::write_text(dir / "result.json", result.dump(2) + "\n");
  cafewidth::write_text(dir / "manifest.json", cafewidth::make_manifest(ex.config(), command).dump(2) + "\n");
  std::string joined;
  for (const auto& part : command) joined += (joined.empty() ? "" : " ") + part;
  cafewidth::write_text(dir / "timing.json", ex.timing().document(joined).dump(2) + "\n");
  for (const auto& [name, text] : ex.outputs().files) cafewidth::write_text(dir / name, text);
  if (command[0] != "analyze-space") std::cerr << "wrote " << (dir / "result.json").string() << "\n";
}

int fail(int code, const std::string& kind, const std::string& message, json extra = json::object()) {
  json err{{"kind", kind}, {"message", message}, {"exit_code", code}};
  err.update(extra);
  std::cerr << json{{"error", err}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-width search with locally free weight sharing"};
  app.set_version_flag("--version", std::string(cafewidth::kVersion));
  app.require_subcommand(1);

  Overrides o;
  std::string method;
  std::string manifest;
  std::vector<std::string> command;

  auto simple = [&](const std::string& name, const std::string& help) {
    auto* c = app.add_subcommand(name, help);
    add_common(c, o);
    c->callback([&command, name] { command = {name}; });
  };
  auto with_arg = [&](const std::string& name, const std::string& help, std::vector<std::string> choices) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("method", method, "variant")->required()->check(CLI::IsMember(choices));
    add_common(c, o);
    c->callback([&command, &method, name] { command = {name, method}; });
  };

  simple("plan-bins", "bin plans for every stage");
  simple("analyze-space", "search-space size of the staged bin plans");
  simple("train", "train supernets and save checkpoints");
  with_arg("search", "train a supernet and search widths", {"random", "evo"});
  simple("multi-stage", "staged shrink-and-search");
  simple("retrain", "train the listed widths from scratch");
  with_arg("baseline", "uniform-scale or random-width baseline", {"uniform", "random"});
  simple("ablate-r", "sweep the offset r");
  simple("ablate-lambda", "sweep the warmup fraction");
  with_arg("ablate-bins", "uniform or sensitivity-based bins", {"uniform", "sensitive"});
  simple("rank-corr", "Kendall tau of supernet scores against trained-from-scratch accuracies");

  auto* replay = app.add_subcommand("replay", "rerun a command from its manifest");
  replay->add_option("manifest", manifest, "manifest.json of an earlier run")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", o.out, "output directory");
  replay->callback([&command] { command = {"replay"}; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(cafewidth::kExitUsage, "usage", e.what());
  }

  try {
    cafewidth::ExperimentConfig cfg;
    if (command[0] == "replay") {
      const json m = read_json(manifest);
      if (!m.contains("config") || !m.contains("command")) throw cafewidth::ConfigError("not a manifest: " + manifest);
      command = m["command"].get<std::vector<std::string>>();
      cfg = cafewidth::parse_config(m["config"], fs::absolute(manifest).parent_path());
    } else {
      cfg = cafewidth::parse_config(apply_overrides(read_json(o.config), o), fs::absolute(o.config).parent_path());
    }
    cafewidth::Experiment ex(std::move(cfg));
    emit(ex, command, o.out);
    return cafewidth::kExitOk;
  } catch (const cafewidth::TrainingError& e) {
    return fail(cafewidth::kExitTraining, "training", e.what(), {{"layer", e.layer()}, {"iteration", e.iteration()}});
  } catch (const cafewidth::Error& e) {
    return fail(cafewidth::exit_code(e.kind()), cafewidth::to_string(e.kind()), e.what());
  } catch (const std::invalid_argument& e) {
    return fail(cafewidth::kExitConfig, "config", e.what());
  } catch (const std::exception& e) {
    return fail(cafewidth::kExitOther, "internal", e.what());
  }
}
