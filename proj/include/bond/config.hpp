#pragma once

#include "bond/sim.hpp"
#include "bond/train.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace bond {

// Config problems carry the offending key so the CLI can name it.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what) : Error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// key = value text. `[section]` headers prefix the following keys with
// "section."; '#' starts a comment; values may be quoted; lists are comma
// separated, optionally inside brackets.
struct RunConfig {
  std::string model;  // model file (written by train, read by everything else)
  std::string arch = "FC2-32";
  TaskKind task = TaskKind::CollisionAvoidance;
  Method method = Method::BPO1;
  ConstraintMode constraint = ConstraintMode::WorstCase;
  int K = 1;
  int p = 2;
  BoundsMethod bounds = BoundsMethod::DUAL;
  std::string solver = "ipm";
  std::vector<std::uint64_t> seeds{1};
  std::string out = "out";
  std::string index;  // safety index file (written by synth, read by run/bench)
  int horizon = 100;
  int max_nodes = 5000;

  TrainConfig train;
  SynthConfig synth;

  Vec bounds_state;  // state for the bounds command; defaults to the task start

  std::vector<std::string> bench_models;
  std::vector<std::string> bench_indices;  // per model, '+' joins one file per task
  std::vector<Method> bench_methods{Method::BPO1};
  std::vector<ConstraintMode> bench_constraints{ConstraintMode::WorstCase};
  std::vector<TaskKind> bench_tasks{TaskKind::CollisionAvoidance};

  std::string trajectory;  // plot input

  std::set<std::string> given;  // keys present in the file or overrides

  bool has(const std::string& key) const { return given.count(key) > 0; }

  void set(const std::string& key, const std::string& value);

  StepOptions step_options() const {
    StepOptions o;
    o.p = p;
    o.K = method == Method::BPO2 ? 2 : 1;
    o.max_nodes = max_nodes;
    return o;
  }

  RunOptions run_options() const {
    RunOptions r;
    r.p = p;
    r.bounds_method = bounds;
    r.step = step_options();
    return r;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

inline std::vector<std::string> split_list(std::string v) {
  v = trim(v);
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = unquote(trim(tok));
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

template <typename T, typename F>
T wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

inline long config_int(const std::string& key, const std::string& v, long lo, long hi) {
  const long x = wrap<long>(key, [&] { return parse_int(v, "value"); });
  if (x < lo || x > hi) {
    throw ConfigError(key, "value " + v + " out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return x;
}

inline double config_double(const std::string& key, const std::string& v) {
  const double x = wrap<double>(key, [&] { return parse_double(v, "value"); });
  if (!std::isfinite(x)) throw ConfigError(key, "value must be finite");
  return x;
}

// "1,2,5" or "1..10" (inclusive) or a single seed
inline std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> seeds;
  const auto dots = v.find("..");
  if (dots != std::string::npos) {
    const long a = config_int(key, trim(v.substr(0, dots)), 0, 1L << 40);
    const long b = config_int(key, trim(v.substr(dots + 2)), 0, 1L << 40);
    if (b < a) throw ConfigError(key, "empty seed range '" + v + "'");
    for (long s = a; s <= b; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
    return seeds;
  }
  for (const auto& t : split_list(v)) seeds.push_back(static_cast<std::uint64_t>(config_int(key, t, 0, 1L << 40)));
  if (seeds.empty()) throw ConfigError(key, "no seeds given");
  return seeds;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = unquote(trim(raw));
  if (v.empty()) throw ConfigError(key, "empty value");
  if (key == "model") {
    model = v;
  } else if (key == "arch") {
    wrap<int>(key, [&] { return static_cast<int>(parse_arch(v).size()); });
    arch = v;
  } else if (key == "task") {
    task = wrap<TaskKind>(key, [&] { return parse_task(v); });
  } else if (key == "method") {
    if (v == "bpo" || v == "BPO") {
      method = K == 2 ? Method::BPO2 : Method::BPO1;
    } else {
      method = wrap<Method>(key, [&] { return parse_method(v); });
    }
  } else if (key == "constraint") {
    constraint = wrap<ConstraintMode>(key, [&] { return parse_constraint(v); });
  } else if (key == "K") {
    K = static_cast<int>(config_int(key, v, 1, 2));
    if (method != Method::MIP) method = K == 2 ? Method::BPO2 : Method::BPO1;
  } else if (key == "p") {
    p = static_cast<int>(config_int(key, v, 1, 2));
  } else if (key == "bounds") {
    bounds = wrap<BoundsMethod>(key, [&] { return parse_bounds_method(v); });
  } else if (key == "solver") {
    if (v != "ipm") throw ConfigError(key, "unknown solver '" + v + "' (only ipm is available)");
    solver = v;
  } else if (key == "seeds" || key == "seed") {
    seeds = parse_seeds(key, v);
  } else if (key == "out") {
    out = v;
  } else if (key == "index") {
    index = v;
  } else if (key == "horizon") {
    horizon = static_cast<int>(config_int(key, v, 1, 100000));
  } else if (key == "mip.max_nodes") {
    max_nodes = static_cast<int>(config_int(key, v, 1, 100000000));
  } else if (key == "train.dataset_size") {
    train.dataset_size = static_cast<int>(config_int(key, v, 1, 100000000));
  } else if (key == "train.epochs") {
    train.epochs = static_cast<int>(config_int(key, v, 1, 1000000));
  } else if (key == "train.batch") {
    train.batch = static_cast<int>(config_int(key, v, 1, 1000000));
  } else if (key == "train.learning_rate") {
    train.learning_rate = config_double(key, v);
    if (!(train.learning_rate > 0.0)) throw ConfigError(key, "must be positive");
  } else if (key == "train.seed") {
    train.seed = static_cast<std::uint64_t>(config_int(key, v, 0, 1L << 40));
  } else if (key == "synth.samples") {
    synth.sample_count = static_cast<int>(config_int(key, v, 1, 100000000));
  } else if (key == "synth.population") {
    synth.population = static_cast<int>(config_int(key, v, 2, 100000));
  } else if (key == "synth.generations") {
    synth.generations = static_cast<int>(config_int(key, v, 1, 100000));
  } else if (key == "synth.grid") {
    synth.grid = static_cast<int>(config_int(key, v, 2, 1000));
  } else if (key == "synth.elite_fraction") {
    synth.elite_fraction = config_double(key, v);
    if (!(synth.elite_fraction > 0.0 && synth.elite_fraction <= 1.0)) throw ConfigError(key, "must be in (0, 1]");
  } else if (key == "synth.constant_samples") {
    synth.constant_samples = static_cast<int>(config_int(key, v, 1, 100000000));
  } else if (key == "synth.seed") {
    synth.seed = static_cast<std::uint64_t>(config_int(key, v, 0, 1L << 40));
  } else if (key == "synth.mode") {
    if (v == "plain") synth.mode = SynthMode::Plain;
    else if (v == "worst_case") synth.mode = SynthMode::WorstCase;
    else throw ConfigError(key, "unknown mode '" + v + "' (expected plain or worst_case)");
  } else if (key == "bounds.state") {
    const auto parts = split_list(v);
    if (parts.size() != 4) throw ConfigError(key, "expected 4 comma separated numbers");
    bounds_state.resize(4);
    for (int i = 0; i < 4; ++i) bounds_state[i] = config_double(key, parts[i]);
  } else if (key == "bench.models") {
    bench_models = split_list(v);
  } else if (key == "bench.indices") {
    bench_indices = split_list(v);
  } else if (key == "bench.methods") {
    bench_methods.clear();
    for (const auto& t : split_list(v)) bench_methods.push_back(wrap<Method>(key, [&] { return parse_method(t); }));
  } else if (key == "bench.constraints") {
    bench_constraints.clear();
    for (const auto& t : split_list(v))
      bench_constraints.push_back(wrap<ConstraintMode>(key, [&] { return parse_constraint(t); }));
  } else if (key == "bench.tasks") {
    bench_tasks.clear();
    for (const auto& t : split_list(v)) bench_tasks.push_back(wrap<TaskKind>(key, [&] { return parse_task(t); }));
  } else if (key == "plot.trajectory") {
    trajectory = v;
  } else {
    throw ConfigError(key, "unknown key");
  }
  given.insert(key);
}

inline RunConfig parse_config(std::istream& is) {
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    }
    std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "missing key");
    if (!section.empty()) key = section + "." + key;
    cfg.set(key, line.substr(eq + 1));
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open '" + path + "'");
  return parse_config(is);
}

// Checks that a path-valued key is set and, for inputs, that the file exists.
inline void require_path(const std::string& key, const std::string& value, bool must_exist) {
  if (value.empty()) throw ConfigError(key, "missing (required by this command)");
  if (must_exist && !std::filesystem::exists(value)) throw ConfigError(key, "file '" + value + "' does not exist");
}

}  // namespace bond
