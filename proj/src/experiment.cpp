#include "dqnlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "dqnlab/errors.hpp"
#include "dqnlab/numerics.hpp"
#include "dqnlab/rng.hpp"

namespace dqnlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

json config_to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  const auto& s = t.schedule;
  const auto& v = cfg.verify;
  const auto& p = cfg.sweep.radius_probe;
  json j;
  j["seed"] = cfg.seed;
  j["instance"] = {{"state_dim", cfg.instance.state_dim},
                   {"num_states", cfg.instance.num_states},
                   {"num_actions", cfg.instance.num_actions},
                   {"width", cfg.instance.width},
                   {"depth", cfg.instance.depth},
                   {"gamma", cfg.instance.gamma},
                   {"deterministic", cfg.instance.deterministic}};
  j["train"] = {{"outer_loops", t.outer_loops},
                {"inner_loops", t.inner_loops},
                {"step_size", t.step_size},
                {"momentum", t.momentum},
                {"buffer_size", t.buffer_size},
                {"batch_size", t.batch_size},
                {"burn_in", t.burn_in},
                {"target_rule", to_string(t.target_rule)},
                {"sampling_mode", to_string(t.sampling_mode)},
                {"init", t.init == InitKind::planted ? "planted" : "random"},
                {"init_radius", t.init_radius},
                {"diagnostics", t.diagnostics},
                {"timing", t.timing}};
  j["schedule"] = {{"kind", to_string(s.kind)}, {"eps0", s.eps0},       {"decay", s.decay},
                   {"c_eps", s.c_eps},          {"kappa", s.kappa},     {"c_max", nullptr},
                   {"eps_min", s.eps_min},      {"eps_max", s.eps_max}};
  if (t.c_max) j["schedule"]["c_max"] = *t.c_max;
  j["sweep"] = {{"buffer_sizes", cfg.sweep.buffer_sizes},
                {"c_eps", cfg.sweep.c_eps},
                {"gammas", cfg.sweep.gammas},
                {"radii", cfg.sweep.radii},
                {"seeds", cfg.sweep.seeds},
                {"batch_fraction", cfg.sweep.batch_fraction},
                {"radius_probe",
                 {{"enabled", p.enabled},
                  {"delta_max", p.delta_max},
                  {"steps", p.steps},
                  {"seeds", p.seeds},
                  {"min_converged", p.min_converged}}}};
  j["convergence"] = {{"sup_q_rel", cfg.convergence.sup_q_rel},
                      {"require_policy", cfg.convergence.require_policy}};
  j["verify"] = {{"fd_points", v.fd_points},
                 {"fd_tolerance", v.fd_tolerance},
                 {"bellman_tolerance", v.bellman_tolerance},
                 {"rho_threshold", v.rho_threshold},
                 {"gn_tolerance", v.gn_tolerance},
                 {"hessian_radius", v.hessian_radius},
                 {"hessian_samples", v.hessian_samples},
                 {"lipschitz_radius", v.lipschitz_radius},
                 {"lipschitz_directions", v.lipschitz_directions},
                 {"lipschitz_factor", v.lipschitz_factor},
                 {"hbound_radius", v.hbound_radius},
                 {"hbound_buffer", v.hbound_buffer},
                 {"gap_buffer_sizes", v.gap_buffer_sizes},
                 {"gap_redraws", v.gap_redraws},
                 {"gap_radius", v.gap_radius},
                 {"gap_epsilon", v.gap_epsilon},
                 {"gap_slope_min", v.gap_slope_min},
                 {"gap_slope_max", v.gap_slope_max}};
  j["output_dir"] = cfg.output_dir;
  j["instance_path"] = cfg.instance_path;
  j["jobs"] = cfg.jobs;
  return j;
}

json default_config_json() { return config_to_json(ExperimentConfig{}); }

void merge_config(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ParameterError("config" + where + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ParameterError("unknown config key '" + path + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_config(slot, it.value(), path);
    } else {
      slot = it.value();
    }
  }
}

namespace {

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ParameterError("expected a boolean, got '" + text + "'");
}

json parse_scalar(const json& like, const std::string& text) {
  try {
    std::size_t used = 0;
    if (like.is_boolean()) return parse_bool(text);
    if (like.is_number_unsigned()) {
      if (!text.empty() && text[0] == '-') throw ParameterError("expected a nonnegative integer");
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw ParameterError("trailing characters");
      return v;
    }
    if (like.is_number_integer()) {
      const auto v = std::stoll(text, &used);
      if (used != text.size()) throw ParameterError("trailing characters");
      return v;
    }
    if (like.is_number() || like.is_null()) {
      if (like.is_null() && text == "null") return nullptr;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw ParameterError("trailing characters");
      return v;
    }
    if (like.is_string()) return text;
  } catch (const std::logic_error&) {
    throw ParameterError("cannot parse '" + text + "'");
  }
  throw ParameterError("unsupported config value type");
}

}  // namespace

json parse_flag_value(const json& like, const std::string& text) {
  if (!like.is_array()) return parse_scalar(like, text);
  if (!text.empty() && text.front() == '[') {
    try {
      return json::parse(text);
    } catch (const json::exception&) {
      throw ParameterError("cannot parse list '" + text + "'");
    }
  }
  const json elem = like.empty() ? json(0.0) : like.front();
  json out = json::array();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_scalar(elem, item));
  }
  return out;
}

namespace {

void collect_leaves(const json& j, std::vector<std::string>& prefix,
                    std::vector<std::vector<std::string>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    prefix.push_back(it.key());
    if (it.value().is_object()) {
      collect_leaves(it.value(), prefix, out);
    } else {
      out.push_back(prefix);
    }
    prefix.pop_back();
  }
}

}  // namespace

std::vector<std::vector<std::string>> config_leaves(const json& j) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> prefix;
  collect_leaves(j, prefix, out);
  return out;
}

std::string flag_name(const std::vector<std::string>& path) {
  std::string name = "--";
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i > 0) name += '-';
    for (char c : path[i]) name += c == '_' ? '-' : c;
  }
  return name;
}

ExperimentConfig config_from_json(const json& input) {
  json j = default_config_json();
  merge_config(j, input);
  ExperimentConfig cfg;
  try {
    cfg.seed = j.at("seed").get<std::uint64_t>();
    const auto& in = j.at("instance");
    cfg.instance.state_dim = in.at("state_dim").get<std::size_t>();
    cfg.instance.num_states = in.at("num_states").get<std::size_t>();
    cfg.instance.num_actions = in.at("num_actions").get<std::size_t>();
    cfg.instance.width = in.at("width").get<std::size_t>();
    cfg.instance.depth = in.at("depth").get<std::size_t>();
    cfg.instance.gamma = in.at("gamma").get<double>();
    cfg.instance.deterministic = in.at("deterministic").get<bool>();

    const auto& tr = j.at("train");
    auto& t = cfg.train;
    t.outer_loops = tr.at("outer_loops").get<std::size_t>();
    t.inner_loops = tr.at("inner_loops").get<std::size_t>();
    t.step_size = tr.at("step_size").get<double>();
    t.momentum = tr.at("momentum").get<double>();
    t.buffer_size = tr.at("buffer_size").get<std::size_t>();
    t.batch_size = tr.at("batch_size").get<std::size_t>();
    t.burn_in = tr.at("burn_in").get<std::size_t>();
    t.target_rule = parse_target_rule(tr.at("target_rule").get<std::string>());
    t.sampling_mode = parse_sampling_mode(tr.at("sampling_mode").get<std::string>());
    const auto init = tr.at("init").get<std::string>();
    if (init != "planted" && init != "random") throw ParameterError("train.init must be planted or random");
    t.init = init == "planted" ? InitKind::planted : InitKind::random;
    t.init_radius = tr.at("init_radius").get<double>();
    t.diagnostics = tr.at("diagnostics").get<bool>();
    t.timing = tr.at("timing").get<bool>();

    const auto& sc = j.at("schedule");
    auto& s = t.schedule;
    s.kind = parse_schedule_kind(sc.at("kind").get<std::string>());
    s.eps0 = sc.at("eps0").get<double>();
    s.decay = sc.at("decay").get<double>();
    s.c_eps = sc.at("c_eps").get<double>();
    s.kappa = sc.at("kappa").get<double>();
    if (!sc.at("c_max").is_null()) t.c_max = sc.at("c_max").get<double>();
    s.eps_min = sc.at("eps_min").get<double>();
    s.eps_max = sc.at("eps_max").get<double>();

    const auto& sw = j.at("sweep");
    cfg.sweep.buffer_sizes = sw.at("buffer_sizes").get<std::vector<std::size_t>>();
    cfg.sweep.c_eps = sw.at("c_eps").get<std::vector<double>>();
    cfg.sweep.gammas = sw.at("gammas").get<std::vector<double>>();
    cfg.sweep.radii = sw.at("radii").get<std::vector<double>>();
    cfg.sweep.seeds = sw.at("seeds").get<std::size_t>();
    cfg.sweep.batch_fraction = sw.at("batch_fraction").get<double>();
    const auto& rp = sw.at("radius_probe");
    auto& p = cfg.sweep.radius_probe;
    p.enabled = rp.at("enabled").get<bool>();
    p.delta_max = rp.at("delta_max").get<double>();
    p.steps = rp.at("steps").get<std::size_t>();
    p.seeds = rp.at("seeds").get<std::size_t>();
    p.min_converged = rp.at("min_converged").get<std::size_t>();

    cfg.convergence.sup_q_rel = j.at("convergence").at("sup_q_rel").get<double>();
    cfg.convergence.require_policy = j.at("convergence").at("require_policy").get<bool>();

    const auto& vf = j.at("verify");
    auto& v = cfg.verify;
    v.fd_points = vf.at("fd_points").get<std::size_t>();
    v.fd_tolerance = vf.at("fd_tolerance").get<double>();
    v.bellman_tolerance = vf.at("bellman_tolerance").get<double>();
    v.rho_threshold = vf.at("rho_threshold").get<double>();
    v.gn_tolerance = vf.at("gn_tolerance").get<double>();
    v.hessian_radius = vf.at("hessian_radius").get<double>();
    v.hessian_samples = vf.at("hessian_samples").get<std::size_t>();
    v.lipschitz_radius = vf.at("lipschitz_radius").get<double>();
    v.lipschitz_directions = vf.at("lipschitz_directions").get<std::size_t>();
    v.lipschitz_factor = vf.at("lipschitz_factor").get<double>();
    v.hbound_radius = vf.at("hbound_radius").get<double>();
    v.hbound_buffer = vf.at("hbound_buffer").get<std::size_t>();
    v.gap_buffer_sizes = vf.at("gap_buffer_sizes").get<std::vector<std::size_t>>();
    v.gap_redraws = vf.at("gap_redraws").get<std::size_t>();
    v.gap_radius = vf.at("gap_radius").get<double>();
    v.gap_epsilon = vf.at("gap_epsilon").get<double>();
    v.gap_slope_min = vf.at("gap_slope_min").get<double>();
    v.gap_slope_max = vf.at("gap_slope_max").get<double>();

    cfg.output_dir = j.at("output_dir").get<std::string>();
    cfg.instance_path = j.at("instance_path").get<std::string>();
    cfg.jobs = j.at("jobs").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParameterError(std::string("config: ") + e.what());
  }

  const auto& in = cfg.instance;
  if (!(in.gamma > 0.0 && in.gamma < 1.0)) throw ParameterError("instance.gamma must lie in (0, 1)");
  if (in.state_dim == 0 || in.num_states == 0 || in.num_actions == 0 || in.width == 0 ||
      in.depth == 0) {
    throw ParameterError("instance sizes must be at least 1");
  }
  cfg.train.validate();
  for (double g : cfg.sweep.gammas) {
    if (!(g > 0.0 && g < 1.0)) throw ParameterError("sweep.gammas must lie in (0, 1)");
  }
  for (std::size_t n : cfg.sweep.buffer_sizes) {
    if (n == 0) throw ParameterError("sweep.buffer_sizes must be positive");
  }
  for (double d : cfg.sweep.radii) {
    if (!(d >= 0.0)) throw ParameterError("sweep.radii must be nonnegative");
  }
  if (cfg.sweep.seeds == 0) throw ParameterError("sweep.seeds must be at least 1");
  if (!(cfg.sweep.batch_fraction >= 0.0 && cfg.sweep.batch_fraction <= 1.0)) {
    throw ParameterError("sweep.batch_fraction must lie in [0, 1]");
  }
  const auto& p = cfg.sweep.radius_probe;
  if (p.seeds == 0 || p.min_converged > p.seeds) {
    throw ParameterError("radius_probe: need 1 <= min_converged <= seeds");
  }
  if (!(p.delta_max > 0.0)) throw ParameterError("radius_probe.delta_max must be positive");
  if (cfg.jobs == 0) throw ParameterError("jobs must be at least 1");
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("output_dir");
  j.erase("instance_path");
  j.erase("jobs");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json output_meta(const ExperimentConfig& cfg) {
  return {{"tool", kToolName}, {"version", kToolVersion}, {"config_hash", config_hash(cfg)}};
}

std::string csv_meta_line(const ExperimentConfig& cfg) {
  return std::string("# ") + kToolName + " " + kToolVersion + " config_hash=" + config_hash(cfg);
}

std::uint64_t instance_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 0); }
std::uint64_t train_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 1); }

// ---------------------------------------------------------------------------
// Files

void write_text_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

std::string metrics_csv_text(const ExperimentConfig& cfg, std::span<const MetricsRecord> records) {
  std::ostringstream out;
  out << csv_meta_line(cfg) << '\n';
  write_metrics_csv(records, out);
  return out.str();
}

Instance generate_instance(const ExperimentConfig& cfg) {
  Rng rng(instance_seed(cfg));
  return plant(cfg.instance, rng);
}

void write_instance(const ExperimentConfig& cfg, const Instance& inst, const fs::path& dir) {
  json spec = spec_to_json(inst.spec);
  spec["meta"] = output_meta(cfg);
  json w = weights_to_json(inst.wstar);
  w["meta"] = output_meta(cfg);
  write_text_file(dir / "instance.json", dump_json(spec));
  write_text_file(dir / inst.spec.wstar_file, dump_json(w));
}

Instance load_instance(const fs::path& instance_json) {
  Instance inst;
  try {
    inst.spec = spec_from_json(read_json_file(instance_json));
    inst.wstar = weights_from_json(read_json_file(instance_json.parent_path() / inst.spec.wstar_file));
  } catch (const json::exception& e) {
    throw IoError(instance_json.string() + ": " + e.what());
  }
  if (inst.wstar.input_dim != inst.spec.input_dim()) {
    throw ShapeError("W* input dimension does not match the instance");
  }
  return inst;
}

fs::path instance_path(const ExperimentConfig& cfg) {
  if (!cfg.instance_path.empty()) return cfg.instance_path;
  return fs::path(cfg.output_dir) / "instance.json";
}

// ---------------------------------------------------------------------------
// Runs

double max_abs_q(const MdpSpec& spec, const NetworkWeights& w) {
  double m = 0.0;
  for (double q : q_table(spec, w)) m = std::max(m, std::abs(q));
  return m;
}

bool run_converged(std::span<const MetricsRecord> records, double max_abs_qstar,
                   const ConvergenceRule& rule) {
  if (records.empty()) return false;
  const auto& last = records.back();
  if (rule.require_policy && last.c_t > 0.0) return false;
  return last.sup_q_err <= rule.sup_q_rel * max_abs_qstar;
}

std::optional<FitReport> run_rate(std::span<const MetricsRecord> records) {
  try {
    return fit_rate(records, noise_floor_window(records, 10.0, 0));
  } catch (const FitError&) {
    return std::nullopt;
  }
}

std::string RunKey::id() const {
  return "n" + std::to_string(n_index) + "_c" + std::to_string(c_index) + "_g" +
         std::to_string(gamma_index) + "_d" + std::to_string(delta_index) + "_t" +
         std::to_string(trial);
}

namespace {

template <class T>
std::vector<T> axis_or(const std::vector<T>& axis, T base) {
  return axis.empty() ? std::vector<T>{base} : axis;
}

}  // namespace

std::vector<RunSpec> expand_sweep(const ExperimentConfig& cfg) {
  const auto ns = axis_or(cfg.sweep.buffer_sizes, cfg.train.buffer_size);
  const auto cs = axis_or(cfg.sweep.c_eps, cfg.train.schedule.c_eps);
  const auto gs = axis_or(cfg.sweep.gammas, cfg.instance.gamma);
  const auto ds = axis_or(cfg.sweep.radii, cfg.train.init_radius);
  std::vector<RunSpec> runs;
  for (std::size_t ni = 0; ni < ns.size(); ++ni)
    for (std::size_t ci = 0; ci < cs.size(); ++ci)
      for (std::size_t gi = 0; gi < gs.size(); ++gi)
        for (std::size_t di = 0; di < ds.size(); ++di)
          for (std::size_t trial = 0; trial < cfg.sweep.seeds; ++trial) {
            RunSpec r;
            r.key = {ni, ci, gi, di, trial};
            r.buffer_size = ns[ni];
            r.c_eps = cs[ci];
            r.gamma = gs[gi];
            r.init_radius = ds[di];
            r.seed = derive_seed(derive_seed(cfg.seed, 2, ni, gi), trial);
            runs.push_back(r);
          }
  return runs;
}

TrainConfig train_config_for(const ExperimentConfig& cfg, const RunSpec& run) {
  TrainConfig t = cfg.train;
  t.buffer_size = run.buffer_size;
  t.schedule.c_eps = run.c_eps;
  t.init_radius = run.init_radius;
  t.seed = run.seed;
  if (cfg.sweep.batch_fraction > 0.0) {
    const auto b = static_cast<std::size_t>(
        std::llround(static_cast<double>(run.buffer_size) * cfg.sweep.batch_fraction));
    t.batch_size = std::clamp<std::size_t>(b, 1, run.buffer_size);
  }
  return t;
}

RunOutcome execute_run(const ExperimentConfig& cfg, const Instance& inst, const RunSpec& run) {
  RunOutcome out;
  out.spec = run;
  out.max_abs_qstar = max_abs_q(inst.spec, inst.wstar);
  try {
    out.records = dqnlab::run(inst.spec, inst.wstar, train_config_for(cfg, run)).records;
  } catch (const DivergenceError& e) {
    out.records = e.records;
    out.status = "diverged";
    out.error = e.what();
  } catch (const std::exception& e) {
    out.status = "error";
    out.error = e.what();
  }
  out.converged = out.status == "ok" && run_converged(out.records, out.max_abs_qstar, cfg.convergence);
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  const std::size_t count = std::min(jobs, n);
  for (std::size_t w = 0; w < count; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

RadiusProbeResult probe_radius(const ExperimentConfig& cfg, const Instance& inst, double c_eps) {
  const auto& probe = cfg.sweep.radius_probe;
  RadiusProbeResult result;
  result.c_eps = c_eps;
  auto converged_count = [&](double delta) {
    std::vector<char> ok(probe.seeds, 0);
    parallel_for(probe.seeds, cfg.jobs, [&](std::size_t trial) {
      RunSpec r;
      r.key.trial = trial;
      r.buffer_size = cfg.train.buffer_size;
      r.c_eps = c_eps;
      r.gamma = inst.spec.gamma;
      r.init_radius = delta;
      // Shared across c_eps and delta: every probe point sees the same seeds.
      r.seed = derive_seed(cfg.seed, 3, trial);
      ok[trial] = execute_run(cfg, inst, r).converged ? 1 : 0;
    });
    const auto count = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 1));
    result.evaluations.emplace_back(delta, count);
    return count;
  };
  if (converged_count(probe.delta_max) >= probe.min_converged) {
    result.radius = probe.delta_max;
    return result;
  }
  double lo = 0.0;
  double hi = probe.delta_max;
  for (std::size_t step = 0; step < probe.steps; ++step) {
    const double mid = 0.5 * (lo + hi);
    if (converged_count(mid) >= probe.min_converged) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  result.radius = lo;
  return result;
}

namespace {

json record_json(const MetricsRecord& r) {
  json j = {{"t", r.t},         {"epsilon", r.epsilon}, {"e_t", r.e_t},
            {"e_t_aligned", r.e_t_aligned},            {"sup_q_err", r.sup_q_err},
            {"c_t", r.c_t},     {"f_pop", r.f_pop}};
  if (r.grad_gap) j["grad_gap"] = *r.grad_gap;
  return j;
}

json line_fit_json(const std::string& quantity, const std::vector<double>& xs,
                   const std::vector<double>& ys) {
  try {
    const auto line = fit_line(xs, ys);
    return {{"quantity", quantity},
            {"slope", line.slope},
            {"intercept", line.intercept},
            {"residual", line.residual_norm},
            {"count", xs.size()}};
  } catch (const FitError& e) {
    return {{"quantity", quantity}, {"error", e.what()}};
  }
}

}  // namespace

json aggregate_runs(const ExperimentConfig& cfg, std::vector<RunOutcome> runs,
                    const std::vector<RadiusProbeResult>& radii) {
  std::sort(runs.begin(), runs.end(),
            [](const RunOutcome& a, const RunOutcome& b) { return a.spec.key < b.spec.key; });
  json out;
  out["meta"] = output_meta(cfg);
  json list = json::array();
  std::map<std::size_t, std::vector<double>> sup_by_n;
  std::map<std::size_t, std::vector<double>> e_by_n;
  std::map<double, std::vector<double>> rate_by_c;
  for (const auto& r : runs) {
    json j = {{"id", r.spec.key.id()},
              {"buffer_size", r.spec.buffer_size},
              {"c_eps", r.spec.c_eps},
              {"gamma", r.spec.gamma},
              {"init_radius", r.spec.init_radius},
              {"trial", r.spec.key.trial},
              {"seed", r.spec.seed},
              {"status", r.status},
              {"converged", r.converged},
              {"csv", "runs/" + r.spec.key.id() + ".csv"}};
    if (!r.error.empty()) j["error"] = r.error;
    if (!r.records.empty()) j["final"] = record_json(r.records.back());
    const auto rate = r.status == "ok" ? run_rate(r.records) : std::nullopt;
    j["rate"] = rate ? json(fit_to_json(*rate)) : json(nullptr);
    list.push_back(j);
    if (r.status == "ok" && !r.records.empty()) {
      sup_by_n[r.spec.buffer_size].push_back(r.records.back().sup_q_err);
      e_by_n[r.spec.buffer_size].push_back(r.records.back().e_t);
      if (rate) rate_by_c[r.spec.c_eps].push_back(rate->value);
    }
  }
  out["runs"] = list;

  json fits;
  auto scaling = [](const std::map<std::size_t, std::vector<double>>& by_n,
                    const std::string& quantity) {
    std::map<std::size_t, double> medians;
    json points = json::array();
    for (const auto& [n, vals] : by_n) {
      medians[n] = median(vals);
      points.push_back({{"buffer_size", n}, {"median", medians[n]}, {"runs", vals.size()}});
    }
    json j;
    try {
      j = fit_to_json(fit_sample_scaling(medians));
    } catch (const FitError& e) {
      j = {{"error", e.what()}};
    }
    j["quantity"] = quantity;
    j["points"] = points;
    return j;
  };
  fits["error_vs_n"] = scaling(sup_by_n, "median final sup_q_err vs N (log-log)");
  fits["e_t_vs_n"] = scaling(e_by_n, "median final e_t vs N (log-log)");

  std::vector<double> cs;
  std::vector<double> rates;
  json rate_points = json::array();
  for (const auto& [c, vals] : rate_by_c) {
    cs.push_back(c);
    rates.push_back(median(vals));
    rate_points.push_back({{"c_eps", c}, {"median_rate", rates.back()}, {"runs", vals.size()}});
  }
  fits["rate_vs_c_eps"] = line_fit_json("median fitted rate vs c_eps", cs, rates);
  fits["rate_vs_c_eps"]["points"] = rate_points;

  if (!radii.empty()) {
    auto sorted = radii;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.c_eps < b.c_eps; });
    std::vector<double> xs;
    std::vector<double> ys;
    json points = json::array();
    for (const auto& r : sorted) {
      xs.push_back(r.c_eps);
      ys.push_back(r.radius);
      json evals = json::array();
      for (const auto& [delta, count] : r.evaluations) {
        evals.push_back({{"delta", delta}, {"converged", count}});
      }
      points.push_back({{"c_eps", r.c_eps}, {"radius", r.radius}, {"evaluations", evals}});
    }
    fits["radius_vs_c_eps"] = line_fit_json("convergence radius vs c_eps", xs, ys);
    fits["radius_vs_c_eps"]["points"] = points;
  }
  out["fits"] = fits;
  return out;
}

// ---------------------------------------------------------------------------
// Verification

namespace {

constexpr double kKinkMargin = 1e-6;
constexpr double kFdStep = 1e-7;

double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0;
  double ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  if (ref == 0.0) return std::sqrt(diff);
  return std::sqrt(diff / ref);
}

NetworkWeights perturbed(const NetworkWeights& w, double radius, Rng& rng) {
  NetworkWeights out = w;
  axpy(radius, random_direction(w, rng), out);
  return out;
}

CheckResult check_q_grad(const ExperimentConfig& cfg, const Instance& inst) {
  const auto& v = cfg.verify;
  Rng rng(derive_seed(cfg.seed, 4, 0));
  CheckResult c;
  c.threshold = v.fd_tolerance;
  std::size_t accepted = 0;
  std::size_t skipped = 0;
  double worst = 0.0;
  for (std::size_t attempt = 0; accepted < v.fd_points && attempt < 20 * v.fd_points + 20; ++attempt) {
    const auto w = perturbed(inst.wstar, rng.uniform(0.1, 1.0), rng);
    const auto x = feature_map(inst.spec, rng.uniform_index(inst.spec.num_states),
                               rng.uniform_index(inst.spec.num_actions));
    if (min_abs_preactivation(w, x) < kKinkMargin) {
      ++skipped;
      continue;
    }
    ForwardTrace trace;
    q_forward(w, x, trace);
    const auto analytic = q_grad(w, trace).flatten();
    NetworkWeights probe = w;
    const auto fd = finite_diff_grad(
        [&](std::span<const double> theta) {
          probe.assign(theta);
          return q_value(probe, x);
        },
        w.flatten(), kFdStep);
    worst = std::max(worst, relative_error(analytic, fd));
    ++accepted;
  }
  c.value = worst;
  c.pass = accepted == v.fd_points && worst <= v.fd_tolerance;
  c.details = {{"points", accepted}, {"skipped_near_kink", skipped}, {"fd_step", kFdStep}};
  return c;
}

CheckResult check_population_grad(const ExperimentConfig& cfg, const Instance& inst,
                                  const StateActionMeasure& mu) {
  const auto& v = cfg.verify;
  Rng rng(derive_seed(cfg.seed, 4, 1));
  CheckResult c;
  c.threshold = v.fd_tolerance;
  const std::size_t wanted = std::max<std::size_t>(10, v.fd_points / 10);
  std::size_t accepted = 0;
  std::size_t skipped = 0;
  double worst = 0.0;
  for (std::size_t attempt = 0; accepted < wanted && attempt < 20 * wanted; ++attempt) {
    const auto w = perturbed(inst.wstar, rng.uniform(0.1, 1.0), rng);
    bool near_kink = false;
    for (std::size_t i = 0; i < mu.size() && !near_kink; ++i) {
      const auto x = feature_map(inst.spec, mu.states[i], mu.actions[i]);
      near_kink = min_abs_preactivation(w, x) < kKinkMargin ||
                  min_abs_preactivation(inst.wstar, x) < kKinkMargin;
    }
    if (near_kink) {
      ++skipped;
      continue;
    }
    const auto analytic = population_grad(inst.spec, mu, w, inst.wstar).flatten();
    NetworkWeights probe = w;
    const auto fd = finite_diff_grad(
        [&](std::span<const double> theta) {
          probe.assign(theta);
          return population_risk(inst.spec, mu, probe, inst.wstar);
        },
        w.flatten(), kFdStep);
    worst = std::max(worst, relative_error(analytic, fd));
    ++accepted;
  }
  c.value = worst;
  c.pass = accepted == wanted && worst <= v.fd_tolerance;
  c.details = {{"points", accepted}, {"skipped_near_kink", skipped}, {"fd_step", kFdStep}};
  return c;
}

CheckResult check_rho(const ExperimentConfig& cfg, const Instance& inst,
                      const StateActionMeasure& mu) {
  const auto report = estimate_rho(inst.spec, inst.wstar);
  CheckResult c;
  c.value = report.rho;
  c.threshold = cfg.verify.rho_threshold;
  c.pass = report.rho > cfg.verify.rho_threshold;
  c.details = {{"per_layer_min", report.per_layer_min},
               {"largest", report.spectrum.front()},
               {"parameters", report.spectrum.size()},
               {"support", mu.size()},
               {"degenerate", report.degenerate}};
  return c;
}

double relative_fro(const Matrix& a, const Matrix& b) {
  const double ref = b.frobenius_norm();
  const double diff = (a - b).frobenius_norm();
  return ref == 0.0 ? diff : diff / ref;
}

CheckResult check_hessian_at_wstar(const ExperimentConfig& cfg, const Instance& inst,
                                   const StateActionMeasure& mu) {
  const auto& v = cfg.verify;
  CheckResult c;
  c.threshold = v.rho_threshold;
  c.pass = true;
  double min_eig = std::numeric_limits<double>::infinity();
  json layers = json::array();
  for (std::size_t l = 0; l < inst.wstar.depth; ++l) {
    try {
      const Matrix h = hessian_block(inst.spec, mu, inst.wstar, inst.wstar, l);
      const Matrix g = gauss_newton_block(inst.spec, mu, inst.wstar, l);
      const auto eig = sym_eig(h);
      const double rel = relative_fro(h, g);
      const double lo = eig.values.back();
      min_eig = std::min(min_eig, lo);
      const bool ok = lo > v.rho_threshold && rel <= v.gn_tolerance;
      c.pass = c.pass && ok;
      layers.push_back({{"layer", l + 1},
                        {"lambda_min", lo},
                        {"lambda_max", eig.values.front()},
                        {"gauss_newton_rel_diff", rel},
                        {"pass", ok}});
    } catch (const CapacityError& e) {
      c.pass = false;
      layers.push_back({{"layer", l + 1}, {"error", e.what()}, {"pass", false}});
    }
  }
  c.value = min_eig;
  c.details = {{"layers", layers}, {"gn_tolerance", v.gn_tolerance}, {"width", inst.wstar.width}};
  return c;
}

CheckResult check_hessian_near_wstar(const ExperimentConfig& cfg, const Instance& inst,
                                     const StateActionMeasure& mu) {
  const auto& v = cfg.verify;
  Rng rng(derive_seed(cfg.seed, 4, 2));
  CheckResult c;
  c.threshold = v.rho_threshold;
  c.pass = true;
  double min_eig = std::numeric_limits<double>::infinity();
  double max_eig = 0.0;
  for (std::size_t i = 0; i < v.hessian_samples; ++i) {
    const auto w = perturbed(inst.wstar, v.hessian_radius, rng);
    for (std::size_t l = 0; l < inst.wstar.depth; ++l) {
      try {
        const auto eig = sym_eig(hessian_block(inst.spec, mu, inst.wstar, w, l));
        min_eig = std::min(min_eig, eig.values.back());
        max_eig = std::max(max_eig, eig.values.front());
      } catch (const CapacityError&) {
        c.pass = false;
      }
    }
  }
  c.pass = c.pass && min_eig > v.rho_threshold;
  c.value = min_eig;
  c.details = {{"samples", v.hessian_samples},
               {"radius", v.hessian_radius},
               {"lambda_max", max_eig},
               {"lambda_max_times_width", max_eig * static_cast<double>(inst.wstar.width)}};
  return c;
}

CheckResult check_hessian_lipschitz(const ExperimentConfig& cfg, const Instance& inst) {
  const auto& v = cfg.verify;
  // Ratios below this are finite-difference noise; pairs of them count as consistent.
  constexpr double kRatioFloor = 1e-6;
  CheckResult c;
  c.threshold = v.lipschitz_factor;
  c.pass = true;
  // Distance to the nearest gate flip on the support; beyond it the block jumps,
  // so the probe radius stays inside half of it.
  const double kink_margin =
      support_kink_margin(inst.spec, optimal_measure(inst.spec, inst.wstar), inst.wstar);
  const double radius = std::min(v.lipschitz_radius, 0.5 * kink_margin);
  if (!(radius > 0.0)) {
    c.pass = false;
    c.value = std::numeric_limits<double>::infinity();
    c.details = {{"kink_margin", kink_margin}, {"error", "an input lies on a ReLU kink"}};
    return c;
  }
  double worst_factor = 1.0;
  double max_ratio = 0.0;
  json layers = json::array();
  const std::vector<double> radii{radius, 0.5 * radius};
  for (std::size_t l = 0; l < inst.wstar.depth; ++l) {
    Rng rng(derive_seed(cfg.seed, 4, 3, l));
    try {
      const auto report =
          hessian_lipschitz_ratio(inst.spec, inst.wstar, l, radii, v.lipschitz_directions, rng);
      double layer_factor = 1.0;
      for (std::size_t i = 0; i + 1 < report.samples.size(); i += 2) {
        const double a = report.samples[i].ratio;
        const double b = report.samples[i + 1].ratio;
        if (!std::isfinite(a) || !std::isfinite(b)) {
          c.pass = false;
          continue;
        }
        if (std::max(a, b) <= kRatioFloor) continue;
        const double lo = std::min(a, b);
        const double factor = lo > 0.0 ? std::max(a, b) / lo : std::numeric_limits<double>::infinity();
        layer_factor = std::max(layer_factor, factor);
      }
      worst_factor = std::max(worst_factor, layer_factor);
      max_ratio = std::max(max_ratio, report.max_ratio);
      layers.push_back({{"layer", l + 1}, {"max_ratio", report.max_ratio}, {"worst_pair_factor", layer_factor}});
    } catch (const CapacityError& e) {
      c.pass = false;
      layers.push_back({{"layer", l + 1}, {"error", e.what()}});
    }
  }
  c.pass = c.pass && worst_factor <= v.lipschitz_factor;
  c.value = worst_factor;
  c.details = {{"layers", layers},
               {"kink_margin", kink_margin},
               {"configured_radius", v.lipschitz_radius},
               {"max_ratio", max_ratio},
               {"radii", radii},
               {"directions", v.lipschitz_directions},
               {"width", inst.wstar.width}};
  return c;
}

CheckResult check_h_bound(const ExperimentConfig& cfg, const Instance& inst) {
  const auto& v = cfg.verify;
  Rng rng(derive_seed(cfg.seed, 4, 4));
  const auto w = perturbed(inst.wstar, v.hbound_radius, rng);
  const auto buf = collect(inst.spec, w, 0.5, v.hbound_buffer, cfg.train.burn_in, rng);
  std::vector<std::vector<double>> inputs;
  inputs.reserve(buf.entries.size());
  for (const auto& tr : buf.entries) inputs.push_back(feature_map(inst.spec, tr.s, tr.a));
  const auto report = h_bound_check(w, inst.wstar, inputs);
  CheckResult c;
  c.value = static_cast<double>(report.violations);
  c.threshold = 0.0;
  c.pass = report.violations == 0;
  c.details = {{"samples", report.samples}, {"worst_ratio", report.worst_ratio}, {"radius", v.hbound_radius}};
  return c;
}

CheckResult check_gradient_gap(const ExperimentConfig& cfg, const Instance& inst) {
  const auto& v = cfg.verify;
  Rng rng(derive_seed(cfg.seed, 4, 5));
  const auto w = perturbed(inst.wstar, v.gap_radius, rng);
  std::map<std::size_t, double> mean_gap;
  json points = json::array();
  for (std::size_t n : v.gap_buffer_sizes) {
    double total = 0.0;
    for (std::size_t k = 0; k < v.gap_redraws; ++k) {
      const auto buf = collect(inst.spec, w, v.gap_epsilon, n, cfg.train.burn_in, rng);
      total += gradient_gap(inst.spec, buf, w, w, cfg.train.target_rule).gap;
    }
    mean_gap[n] = total / static_cast<double>(std::max<std::size_t>(1, v.gap_redraws));
    points.push_back({{"buffer_size", n}, {"mean_gap", mean_gap[n]}});
  }
  CheckResult c;
  c.threshold = v.gap_slope_max;
  try {
    const auto fit = fit_sample_scaling(mean_gap);
    c.value = fit.slope;
    c.pass = fit.slope >= v.gap_slope_min && fit.slope <= v.gap_slope_max;
  } catch (const FitError& e) {
    c.value = std::numeric_limits<double>::quiet_NaN();
    c.details["error"] = e.what();
  }
  c.details["points"] = points;
  c.details["slope_range"] = {v.gap_slope_min, v.gap_slope_max};
  c.details["redraws"] = v.gap_redraws;
  c.details["epsilon"] = v.gap_epsilon;
  c.details["radius"] = v.gap_radius;
  return c;
}

}  // namespace

std::map<std::string, CheckResult> verify_instance(const ExperimentConfig& cfg,
                                                   const Instance& inst) {
  const auto mu = optimal_measure(inst.spec, inst.wstar);
  std::map<std::string, CheckResult> checks;
  checks["q_grad_fd"] = check_q_grad(cfg, inst);
  checks["population_grad_fd"] = check_population_grad(cfg, inst, mu);

  CheckResult bellman;
  bellman.value = bellman_residual(inst.spec, inst.wstar);
  bellman.threshold = cfg.verify.bellman_tolerance;
  bellman.pass = bellman.value <= bellman.threshold;
  checks["bellman_residual"] = bellman;

  checks["rho_positive"] = check_rho(cfg, inst, mu);
  checks["hessian_at_wstar"] = check_hessian_at_wstar(cfg, inst, mu);
  checks["hessian_near_wstar"] = check_hessian_near_wstar(cfg, inst, mu);
  checks["hessian_lipschitz"] = check_hessian_lipschitz(cfg, inst);
  checks["h_bound"] = check_h_bound(cfg, inst);
  checks["gradient_gap_scaling"] = check_gradient_gap(cfg, inst);
  return checks;
}

json verify_report(const ExperimentConfig& cfg, const std::map<std::string, CheckResult>& checks) {
  json out;
  out["meta"] = output_meta(cfg);
  bool all = true;
  json list = json::object();
  for (const auto& [name, c] : checks) {
    all = all && c.pass;
    list[name] = {{"pass", c.pass},
                  {"value", std::isfinite(c.value) ? json(c.value) : json(nullptr)},
                  {"threshold", c.threshold},
                  {"details", c.details}};
  }
  out["pass"] = all;
  out["checks"] = list;
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen(const ExperimentConfig& cfg, std::ostream& log) {
  const auto inst = generate_instance(cfg);
  const fs::path dir = instance_path(cfg).parent_path();
  write_instance(cfg, inst, dir.empty() ? fs::path(".") : dir);
  log << "wrote " << (dir / "instance.json").string() << " and "
      << (dir / inst.spec.wstar_file).string() << " (plant seed " << inst.spec.plant_seed
      << ", R_max " << inst.spec.r_max << ")\n";
  return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  const auto inst = load_instance(instance_path(cfg));
  TrainConfig t = cfg.train;
  t.seed = train_seed(cfg);
  const fs::path out = fs::path(cfg.output_dir) / "metrics.csv";
  try {
    const auto result = run(inst.spec, inst.wstar, t);
    write_text_file(out, metrics_csv_text(cfg, result.records));
    const auto& last = result.records.back();
    log << "wrote " << out.string() << " (" << result.records.size() << " records, e_T "
        << last.e_t << ", sup error " << last.sup_q_err << ")\n";
    return kExitOk;
  } catch (const DivergenceError& e) {
    write_text_file(out, metrics_csv_text(cfg, e.records));
    log << e.what() << "; partial metrics kept in " << out.string() << "\n";
    return kExitDiverged;
  }
}

int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log) {
  const auto runs = expand_sweep(cfg);
  const auto gammas = axis_or(cfg.sweep.gammas, cfg.instance.gamma);
  std::vector<Instance> instances;
  for (double g : gammas) {
    ExperimentConfig c = cfg;
    c.instance.gamma = g;
    instances.push_back(generate_instance(c));
  }
  std::vector<RunOutcome> outcomes(runs.size());
  parallel_for(runs.size(), cfg.jobs, [&](std::size_t i) {
    outcomes[i] = execute_run(cfg, instances[runs[i].key.gamma_index], runs[i]);
  });
  const fs::path dir(cfg.output_dir);
  std::size_t failed = 0;
  for (const auto& o : outcomes) {
    write_text_file(dir / "runs" / (o.spec.key.id() + ".csv"), metrics_csv_text(cfg, o.records));
    if (o.status != "ok") ++failed;
  }
  std::vector<RadiusProbeResult> radii;
  if (cfg.sweep.radius_probe.enabled) {
    for (double c : axis_or(cfg.sweep.c_eps, cfg.train.schedule.c_eps)) {
      radii.push_back(probe_radius(cfg, instances.front(), c));
      log << "radius probe c_eps=" << c << ": " << radii.back().radius << "\n";
    }
  }
  write_text_file(dir / "aggregate.json", dump_json(aggregate_runs(cfg, outcomes, radii)));
  log << "wrote " << (dir / "aggregate.json").string() << " (" << runs.size() << " runs, " << failed
      << " diverged or failed)\n";
  return kExitOk;
}

int cmd_verify(const ExperimentConfig& cfg, std::ostream& log) {
  const auto inst = load_instance(instance_path(cfg));
  const auto checks = verify_instance(cfg, inst);
  const auto report = verify_report(cfg, checks);
  const fs::path out = fs::path(cfg.output_dir) / "verify.json";
  write_text_file(out, dump_json(report));
  for (const auto& [name, c] : checks) {
    log << (c.pass ? "pass " : "FAIL ") << name << " value=" << c.value << "\n";
  }
  log << "wrote " << out.string() << "\n";
  return report["pass"].get<bool>() ? kExitOk : kExitCheckFailed;
}

int cmd_analyze(const ExperimentConfig& cfg, const std::vector<std::string>& metrics_files,
                std::ostream& log) {
  if (metrics_files.empty()) throw ParameterError("analyze: no metrics files given");
  json files = json::array();
  for (const auto& path : metrics_files) {
    std::istringstream in(read_text_file(path));
    const auto records = read_metrics_csv(in);
    json j = {{"file", path}, {"records", records.size()}};
    if (!records.empty()) j["final"] = record_json(records.back());
    try {
      const auto window = noise_floor_window(records, 10.0, 0);
      j["window"] = {{"first", window.first}, {"last", window.last}};
      j["rate"] = fit_to_json(fit_rate(records, window));
    } catch (const FitError& e) {
      j["rate"] = {{"error", e.what()}};
    }
    try {
      j["holder"] = fit_to_json(fit_holder(records));
    } catch (const FitError& e) {
      j["holder"] = {{"error", e.what()}};
    }
    std::size_t increases = 0;
    for (std::size_t i = 1; i < records.size(); ++i) {
      if (records[i].c_t > records[i - 1].c_t) ++increases;
    }
    j["c_t_increases"] = increases;
    files.push_back(j);
  }
  json out = {{"meta", output_meta(cfg)}, {"files", files}};
  const fs::path path = fs::path(cfg.output_dir) / "analysis.json";
  write_text_file(path, dump_json(out));
  log << "wrote " << path.string() << "\n";
  return kExitOk;
}

}  // namespace dqnlab
