#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "dqnlab/errors.hpp"
#include "dqnlab/experiment.hpp"
#include "dqnlab/rng.hpp"

using namespace dqnlab;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dqnlab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(DQNLAB_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<MetricsRecord> csv_records(const fs::path& p) {
  std::istringstream in(slurp(p));
  return read_metrics_csv(in);
}

RunOutcome synthetic_outcome(std::size_t ni, std::size_t n, std::size_t trial, double err) {
  RunOutcome o;
  o.spec.key = {ni, 0, 0, 0, trial};
  o.spec.buffer_size = n;
  o.spec.c_eps = 0.25;
  o.spec.gamma = 0.5;
  MetricsRecord r;
  r.sup_q_err = err;
  r.e_t = err;
  o.records = {r};
  return o;
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("config defaults round trip") {
    const json d = default_config_json();
    CHECK(config_to_json(config_from_json(json::object())) == d);
    CHECK(d["seed"] == 1);
    CHECK(d["instance"]["depth"] == 2);
    CHECK(d["train"]["target_rule"] == "dqn");
  }

  TEST_CASE("merge overlays nested keys and rejects unknown ones") {
    json base = default_config_json();
    merge_config(base, json{{"schedule", {{"c_eps", 0.1}}}, {"seed", 9}});
    CHECK(base["schedule"]["c_eps"] == 0.1);
    CHECK(base["schedule"]["kind"] == "geometric");
    CHECK(base["seed"] == 9);
    json again = default_config_json();
    CHECK_THROWS_AS(merge_config(again, json{{"schedule", {{"cc_eps", 0.1}}}}), ParameterError);
    CHECK_THROWS_AS(merge_config(again, json{{"bogus", 1}}), ParameterError);
    CHECK_THROWS_AS(config_from_json(json{{"instance", {{"gamma", 1.5}}}}), ParameterError);
    CHECK_THROWS_AS(config_from_json(json{{"train", {{"target_rule", "sarsa"}}}}), std::exception);
  }

  TEST_CASE("flag names and values") {
    CHECK(flag_name({"schedule", "c_eps"}) == "--schedule-c-eps");
    CHECK(flag_name({"seed"}) == "--seed");
    const json d = default_config_json();
    bool found = false;
    for (const auto& p : config_leaves(d)) found = found || flag_name(p) == "--train-step-size";
    CHECK(found);
    CHECK(parse_flag_value(d["seed"], "42") == 42);
    CHECK(parse_flag_value(d["train"]["step_size"], "0.5") == 0.5);
    CHECK(parse_flag_value(d["instance"]["deterministic"], "true") == true);
    CHECK(parse_flag_value(d["sweep"]["buffer_sizes"], "512,2048") == json::array({512, 2048}));
    CHECK(parse_flag_value(d["sweep"]["c_eps"], "[0.1, 0.2]") == json::array({0.1, 0.2}));
    CHECK(parse_flag_value(d["schedule"]["c_max"], "null").is_null());
    CHECK_THROWS_AS(parse_flag_value(d["seed"], "-3"), ParameterError);
    CHECK_THROWS_AS(parse_flag_value(d["train"]["step_size"], "abc"), ParameterError);
  }

  TEST_CASE("config hash ignores output location only") {
    ExperimentConfig a;
    const auto h = config_hash(a);
    CHECK(h.size() == 16);
    CHECK(std::all_of(h.begin(), h.end(), [](char c) { return std::isxdigit(c) != 0; }));
    ExperimentConfig b = a;
    b.output_dir = "elsewhere";
    b.jobs = 4;
    b.instance_path = "x.json";
    CHECK(config_hash(b) == h);
    b.seed = 2;
    CHECK(config_hash(b) != h);
    CHECK(csv_meta_line(a) == "# dqnlab 0.1.0 config_hash=" + h);
  }

  TEST_CASE("seed streams are distinct") {
    ExperimentConfig c;
    CHECK(instance_seed(c) == derive_seed(1, 0));
    CHECK(train_seed(c) == derive_seed(1, 1));
    CHECK(instance_seed(c) != train_seed(c));
  }

  TEST_CASE("sweep expansion pairs seeds across c_eps and radii") {
    ExperimentConfig c;
    c.sweep.buffer_sizes = {256, 1024};
    c.sweep.c_eps = {0.05, 0.25};
    c.sweep.radii = {0.1, 0.5, 1.0};
    c.sweep.seeds = 3;
    const auto runs = expand_sweep(c);
    CHECK(runs.size() == 2 * 2 * 1 * 3 * 3);
    for (const auto& a : runs)
      for (const auto& b : runs) {
        const bool same_pair = a.key.n_index == b.key.n_index && a.key.trial == b.key.trial;
        CHECK((a.seed == b.seed) == same_pair);
      }
    std::set<std::string> ids;
    for (const auto& r : runs) ids.insert(r.key.id());
    CHECK(ids.size() == runs.size());

    ExperimentConfig single;
    const auto one = expand_sweep(single);
    REQUIRE(one.size() == 1);
    CHECK(one[0].buffer_size == single.train.buffer_size);
    CHECK(one[0].c_eps == single.train.schedule.c_eps);
  }

  TEST_CASE("batch fraction sets the batch per run") {
    ExperimentConfig c;
    c.sweep.batch_fraction = 0.125;
    RunSpec r;
    r.buffer_size = 4096;
    CHECK(train_config_for(c, r).batch_size == 512);
    r.buffer_size = 4;
    CHECK(train_config_for(c, r).batch_size == 1);
  }

  TEST_CASE("aggregation recovers an inverse square-root law and ignores order") {
    ExperimentConfig c;
    std::vector<RunOutcome> runs;
    const std::vector<std::size_t> ns{256, 1024, 4096, 16384};
    for (std::size_t i = 0; i < ns.size(); ++i)
      for (std::size_t t = 0; t < 5; ++t)
        runs.push_back(synthetic_outcome(i, ns[i], t, (1.0 + 0.1 * t) / std::sqrt(double(ns[i]))));
    const json a = aggregate_runs(c, runs);
    std::mt19937 gen(3);
    std::shuffle(runs.begin(), runs.end(), gen);
    const json b = aggregate_runs(c, runs);
    CHECK(a.dump() == b.dump());
    CHECK(a["fits"]["error_vs_n"]["value"].get<double>() == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(a["runs"].size() == 20);
    CHECK(a["meta"]["config_hash"] == config_hash(c));
  }

  TEST_CASE("single-point sweep reports a fit error instead of failing") {
    ExperimentConfig c;
    const json a = aggregate_runs(c, {synthetic_outcome(0, 512, 0, 0.1)});
    CHECK(a["fits"]["error_vs_n"].contains("error"));
    CHECK(a["runs"].size() == 1);
  }

  TEST_CASE("convergence rule") {
    MetricsRecord r;
    r.sup_q_err = 0.05;
    std::vector<MetricsRecord> recs{r};
    CHECK(run_converged(recs, 1.0, {}));
    recs[0].c_t = 0.1;
    CHECK_FALSE(run_converged(recs, 1.0, {}));
    CHECK(run_converged(recs, 1.0, {0.1, false}));
    recs[0].sup_q_err = 0.5;
    CHECK_FALSE(run_converged(recs, 1.0, {0.1, false}));
    CHECK_FALSE(run_converged({}, 1.0, {}));
  }

  TEST_CASE("parallel_for visits every index once and propagates errors") {
    std::vector<int> hits(100, 0);
    parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    CHECK_THROWS(parallel_for(10, 3, [](std::size_t i) {
      if (i == 7) throw std::runtime_error("boom");
    }));
  }

  TEST_CASE("verify flags a rank-deficient plant and a broken reward") {
    ExperimentConfig c;
    c.instance.depth = 1;
    c.instance.num_actions = 1;
    c.verify.gap_buffer_sizes = {256, 1024, 4096};
    c.verify.gap_redraws = 4;
    c.verify.lipschitz_directions = 4;
    auto inst = generate_instance(c);
    auto dup = inst.wstar;
    for (std::size_t i = 0; i < dup.input_dim; ++i) dup.layers[0](i, 1) = dup.layers[0](i, 0);
    Instance degenerate{build_realizable(inst.spec.state_features, 1, inst.spec.transition, dup,
                                         inst.spec.gamma, false),
                        dup};
    auto checks = verify_instance(c, degenerate);
    CHECK_FALSE(checks.at("rho_positive").pass);
    CHECK(checks.at("bellman_residual").pass);
    CHECK(checks.at("q_grad_fd").pass);
    CHECK_FALSE(verify_report(c, checks)["pass"].get<bool>());

    auto broken = inst;
    broken.spec.reward[0] += 1e-3;
    checks = verify_instance(c, broken);
    CHECK_FALSE(checks.at("bellman_residual").pass);
    CHECK(checks.at("bellman_residual").value == doctest::Approx(1e-3).epsilon(1e-6));
  }

  TEST_CASE("instance files round trip") {
    const auto dir = scratch_dir("files");
    ExperimentConfig c;
    c.output_dir = dir.string();
    const auto inst = generate_instance(c);
    write_instance(c, inst, dir);
    const auto back = load_instance(dir / "instance.json");
    CHECK(back.wstar == inst.wstar);
    CHECK(back.spec.reward == inst.spec.reward);
    CHECK(back.spec.transition == inst.spec.transition);
    CHECK_THROWS_AS(load_instance(dir / "missing.json"), IoError);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("gen is deterministic in the seed") {
    const auto a = scratch_dir("gen_a");
    const auto b = scratch_dir("gen_b");
    const auto c = scratch_dir("gen_c");
    CHECK(run_cli("--seed 7 --output-dir " + a.string() + " gen") == 0);
    CHECK(run_cli("--seed 7 --output-dir " + b.string() + " gen") == 0);
    CHECK(run_cli("--output-dir " + c.string() + " gen", "LAB_SEED=8") == 0);
    CHECK(slurp(a / "instance.json") == slurp(b / "instance.json"));
    CHECK(slurp(a / "wstar.json") == slurp(b / "wstar.json"));
    CHECK(slurp(a / "instance.json") != slurp(c / "instance.json"));
    // flags beat the environment
    const auto d = scratch_dir("gen_d");
    CHECK(run_cli("--seed 7 --output-dir " + d.string() + " gen", "LAB_SEED=8") == 0);
    CHECK(slurp(a / "instance.json") == slurp(d / "instance.json"));
  }

  TEST_CASE("usage errors exit with 2") {
    const auto dir = scratch_dir("usage");
    CHECK(run_cli("--instance-gamma 1.5 --output-dir " + dir.string() + " gen") == 2);
    CHECK(run_cli("--no-such-flag 1 gen") == 2);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("--train-step-size abc gen") == 2);
    CHECK(run_cli("--output-dir " + (dir / "nothing").string() + " train") == 2);
    std::ofstream(dir / "bad.json") << R"({"schedule": {"nope": 1}})";
    CHECK(run_cli("--config " + (dir / "bad.json").string() + " gen") == 2);
    CHECK(run_cli("--version") == 0);
  }

  TEST_CASE("config file is overridden by flags") {
    const auto dir = scratch_dir("config");
    std::ofstream(dir / "cfg.json") << R"({"seed": 8, "output_dir": ")" + dir.string() + R"("})";
    const auto ref = scratch_dir("config_ref");
    CHECK(run_cli("--config " + (dir / "cfg.json").string() + " --seed 7 gen") == 0);
    CHECK(run_cli("--seed 7 --output-dir " + ref.string() + " gen") == 0);
    CHECK(slurp(dir / "instance.json") == slurp(ref / "instance.json"));
  }

  TEST_CASE("train with no inner steps records the baseline") {
    const auto dir = scratch_dir("baseline");
    const std::string base = "--output-dir " + dir.string();
    REQUIRE(run_cli(base + " gen") == 0);
    REQUIRE(run_cli(base + " --train-outer-loops 1 --train-inner-loops 0 train") == 0);
    const auto text = slurp(dir / "metrics.csv");
    CHECK(text.rfind("# dqnlab 0.1.0 config_hash=", 0) == 0);
    const auto recs = csv_records(dir / "metrics.csv");
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].t == 0);
    CHECK(recs[0].e_t > 0.0);
  }

  TEST_CASE("planted start on a deterministic instance stays put") {
    const auto dir = scratch_dir("fixed");
    const std::string base = "--output-dir " + dir.string() +
                             " --instance-deterministic true --train-init-radius 0"
                             " --schedule-kind fixed --schedule-eps0 0";
    REQUIRE(run_cli(base + " gen") == 0);
    REQUIRE(run_cli(base + " --train-outer-loops 5 --train-inner-loops 20 train") == 0);
    for (const auto& r : csv_records(dir / "metrics.csv")) {
      CHECK(r.e_t == 0.0);
      CHECK(r.sup_q_err == 0.0);
    }
  }

  TEST_CASE("train, sweep, verify and analyze are byte reproducible") {
    const auto a = scratch_dir("repro_a");
    const auto b = scratch_dir("repro_b");
    const std::string knobs =
        " --train-outer-loops 4 --train-inner-loops 10 --train-buffer-size 256"
        " --sweep-buffer-sizes 128,256 --sweep-seeds 2 --verify-gap-redraws 2"
        " --verify-lipschitz-directions 2 --verify-gap-buffer-sizes 128,256,512";
    for (const auto& d : {a, b}) {
      const std::string base = "--output-dir " + d.string() + knobs;
      REQUIRE(run_cli(base + " gen") == 0);
      REQUIRE(run_cli(base + " train") == 0);
      REQUIRE(run_cli(base + " sweep") == 0);
      const int v = run_cli(base + " verify");
      CHECK((v == 0 || v == 1));
      REQUIRE(run_cli(base + " analyze " + (d / "metrics.csv").string()) == 0);
    }
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "aggregate.json") == slurp(b / "aggregate.json"));
    CHECK(slurp(a / "runs" / "n1_c0_g0_d0_t1.csv") == slurp(b / "runs" / "n1_c0_g0_d0_t1.csv"));
    CHECK(slurp(a / "verify.json") == slurp(b / "verify.json"));
    const auto agg = json::parse(slurp(a / "aggregate.json"));
    CHECK(agg["runs"].size() == 4);
    const auto ver = json::parse(slurp(a / "verify.json"));
    CHECK(ver["checks"].contains("bellman_residual"));
    CHECK(ver["checks"]["bellman_residual"]["pass"] == true);
    const auto ana = json::parse(slurp(a / "analysis.json"));
    CHECK(ana["files"].size() == 1);
  }
}
