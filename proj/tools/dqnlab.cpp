#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dqnlab/errors.hpp"
#include "dqnlab/experiment.hpp"

using namespace dqnlab;
using json = nlohmann::json;

namespace {

std::string dotted(const std::vector<std::string>& path) {
  std::string out;
  for (const auto& p : path) out += (out.empty() ? "" : ".") + p;
  return out;
}

json::json_pointer pointer(const std::vector<std::string>& path) {
  std::string out;
  for (const auto& p : path) out += "/" + p;
  return json::json_pointer(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Planted deep Q-learning laboratory"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);

  std::string config_file;
  app.add_option("--config", config_file, "JSON config file; flags override its keys")
      ->check(CLI::ExistingFile);

  const json defaults = default_config_json();
  const auto leaves = config_leaves(defaults);
  std::map<std::string, std::string> flag_text;
  std::map<std::string, CLI::Option*> flag_opts;
  for (const auto& path : leaves) {
    const std::string key = dotted(path);
    flag_opts[key] = app.add_option(flag_name(path), flag_text[key],
                                    key + " (default " + defaults[pointer(path)].dump() + ")");
  }

  auto* gen = app.add_subcommand("gen", "plant an instance: writes instance.json and wstar.json");
  auto* train = app.add_subcommand("train", "run DQN on an instance: writes metrics.csv");
  auto* sweep = app.add_subcommand("sweep", "run the sweep axes: writes runs/*.csv and aggregate.json");
  auto* verify = app.add_subcommand("verify", "numerical checks on an instance: writes verify.json");
  auto* analyze = app.add_subcommand("analyze", "fit rates and exponents: writes analysis.json");
  std::vector<std::string> metrics_files;
  analyze->add_option("files", metrics_files, "metrics.csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    json j = defaults;
    if (!config_file.empty()) merge_config(j, read_json_file(config_file));
    if (const char* env = std::getenv("LAB_SEED")) {
      j["seed"] = parse_flag_value(defaults["seed"], env);
    }
    for (const auto& path : leaves) {
      const std::string key = dotted(path);
      if (flag_opts[key]->count() > 0) {
        j[pointer(path)] = parse_flag_value(defaults[pointer(path)], flag_text[key]);
      }
    }
    const ExperimentConfig cfg = config_from_json(j);

    if (gen->parsed()) return cmd_gen(cfg, std::cout);
    if (train->parsed()) return cmd_train(cfg, std::cout);
    if (sweep->parsed()) return cmd_sweep(cfg, std::cout);
    if (verify->parsed()) return cmd_verify(cfg, std::cout);
    if (analyze->parsed()) return cmd_analyze(cfg, metrics_files, std::cout);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}
