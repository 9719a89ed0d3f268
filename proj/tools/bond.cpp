#include "bond/config.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace bond;

namespace {

struct Flags {
  std::string config;
  int jobs = 1;
  long seed = -1;
  std::string out;
};

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw Error("cannot open '" + p.string() + "' for writing");
  return os;
}

SynthConfig synth_config(const RunConfig& cfg, const Task& task, int jobs) {
  SynthConfig s = cfg.synth;
  s.region.center = task.spec.other.position(0.0);
  s.bounds_method = cfg.bounds;
  s.jobs = jobs;
  return s;
}

NeuralDynamics input_model(const RunConfig& cfg) {
  require_path("model", cfg.model, true);
  return load_model(cfg.model);
}

SafetyIndex run_index(const RunConfig& cfg, const Task& task, double dt) {
  if (cfg.constraint == ConstraintMode::Plain) return plain_index(task.spec, dt);
  require_path("index", cfg.index, true);
  SafetyIndex idx = load_index(cfg.index, task.spec, dt);
  if (idx.spec.task != task.kind) {
    throw ConfigError("index", "file '" + cfg.index + "' holds a " + to_string(idx.spec.task) + " index but task is " +
                                   to_string(task.kind));
  }
  return idx;
}

std::string run_stem(const RunConfig& cfg, Method m, std::uint64_t seed) {
  return std::string(to_string(cfg.task)) + "_" + to_string(m) + "_" + to_string(cfg.constraint) + "_seed" +
         std::to_string(seed);
}

int cmd_train(const RunConfig& cfg, const Flags& f) {
  require_path("model", cfg.model, false);
  TrainConfig tc = cfg.train;
  tc.sizes = parse_arch(cfg.arch);
  if (f.seed >= 0) tc.seed = static_cast<std::uint64_t>(f.seed);
  const TrainResult r = train_on_unicycle(tc);
  if (fs::path(cfg.model).has_parent_path()) fs::create_directories(fs::path(cfg.model).parent_path());
  save_model(cfg.model, r.model);
  auto os = open_out(fs::path(cfg.out) / "train_loss.csv");
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) os << e + 1 << ',' << detail::fmt17(r.epoch_loss[e]) << '\n';
  std::cout << "trained " << cfg.arch << " rmse " << r.rmse << (r.loss_warning ? " (warning: loss not decreasing)" : "")
            << " -> " << cfg.model << '\n';
  return 0;
}

int cmd_bounds(const RunConfig& cfg, const Flags&) {
  const NeuralDynamics model = input_model(cfg);
  const Task task = make_task(cfg.task);
  const Vec x = cfg.bounds_state.size() ? cfg.bounds_state : task.start;
  const InputBox box = per_step_box(x, unicycle_control_box());
  auto os = open_out(fs::path(cfg.out) / "bounds.csv");
  const LayerBounds b = compute_bounds(model, box, cfg.bounds);
  write_bounds_csv(os, b);
  const LayerBounds ia = compute_bounds(model, box, BoundsMethod::IA);
  const LayerBounds dual = compute_bounds(model, box, BoundsMethod::DUAL);
  auto width = [](const LayerBounds& lb) { return (lb.upper.back() - lb.lower.back()).mean(); };
  std::cout << "output width ia " << width(ia) << " dual " << width(dual) << '\n';
  return 0;
}

int cmd_synth(const RunConfig& cfg, const Flags& f) {
  const NeuralDynamics model = input_model(cfg);
  require_path("index", cfg.index, false);
  const Task task = make_task(cfg.task);
  SynthConfig sc = synth_config(cfg, task, f.jobs);
  if (f.seed >= 0) sc.seed = static_cast<std::uint64_t>(f.seed);
  auto log = open_out(fs::path(cfg.out) / "synth_log.jsonl");
  const auto [index, rep] = synthesize(model, task.spec, sc, &log);
  if (fs::path(cfg.index).has_parent_path()) fs::create_directories(fs::path(cfg.index).parent_path());
  save_index(cfg.index, index);
  nlohmann::json j;
  j["params"] = {rep.params[0], rep.params[1], rep.params[2]};
  j["r"] = rep.r;
  j["r_unmargined"] = rep.r_unmargined;
  j["epsilon"] = rep.epsilon;
  j["delta"] = rep.delta;
  j["zeta"] = index.zeta();
  j["status"] = rep.certified ? "certified" : "uncertified";
  j["history"] = nlohmann::json::array();
  for (const auto& g : rep.history) j["history"].push_back({{"gen", g.generation}, {"r", g.r_best}, {"r0", g.r0_best}});
  auto os = open_out(fs::path(cfg.out) / "synth_report.json");
  os << j.dump(2) << '\n';
  auto tos = open_out(fs::path(cfg.out) / "synth_time.txt");
  tos << rep.wall_time << '\n';
  std::cout << "synth " << (rep.certified ? "certified" : "uncertified") << " r " << rep.r << " eps " << rep.epsilon
            << " -> " << cfg.index << '\n';
  return 0;
}

int cmd_run(const RunConfig& cfg, const Flags& f) {
  const NeuralDynamics model = input_model(cfg);
  Task task = make_task(cfg.task);
  task.horizon = cfg.horizon;
  const SafetyIndex index = run_index(cfg, task, model.dt());
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (f.seed >= 0) seeds = {static_cast<std::uint64_t>(f.seed)};
  const fs::path out(cfg.out);
  auto results = open_out(out / "results.csv");
  write_results_header(results);
  for (std::uint64_t seed : seeds) {
    const TrajectoryLog log = run_trajectory(model, index, cfg.method, task, seed, cfg.run_options());
    const std::string stem = run_stem(cfg, cfg.method, seed);
    auto tr = open_out(out / (stem + ".csv"));
    write_trajectory_csv(tr, log);
    auto tm = open_out(out / (stem + "_timing.csv"));
    write_timing_csv(tm, log);
    auto svg = open_out(out / (stem + ".svg"));
    write_svg(svg, log, task.spec, model.dt(), stem);
    write_results_row(results, {fs::path(cfg.model).stem().string(), cfg.method, cfg.constraint, cfg.task, seed,
                                log.mean_err, log.mean_time, log.min_dist, log.fallbacks});
    std::cout << stem << " min_dist " << log.min_dist << " fallbacks " << log.fallbacks << '\n';
  }
  return 0;
}

int cmd_bench(const RunConfig& cfg, const Flags& f) {
  std::vector<std::string> paths = cfg.bench_models;
  if (paths.empty()) {
    require_path("model", cfg.model, true);
    paths = {cfg.model};
  }
  std::vector<std::string> index_lists = cfg.bench_indices;
  if (index_lists.empty() && !cfg.index.empty()) index_lists = {cfg.index};
  const bool need_index = std::find(cfg.bench_constraints.begin(), cfg.bench_constraints.end(),
                                    ConstraintMode::WorstCase) != cfg.bench_constraints.end();
  if (need_index && index_lists.size() != paths.size()) {
    throw ConfigError("bench.indices", "worst_case needs one entry per model (" + std::to_string(paths.size()) +
                                           " models, " + std::to_string(index_lists.size()) + " entries)");
  }
  std::vector<NeuralDynamics> models;
  for (const auto& p : paths) {
    require_path("bench.models", p, true);
    models.push_back(load_model(p));
  }
  BenchSpec spec;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    BenchModel bm{fs::path(paths[i]).stem().string(), &models[i], {}};
    if (need_index) {
      std::stringstream ss(index_lists[i]);
      std::string file;
      while (std::getline(ss, file, '+')) {
        require_path("bench.indices", file, true);
        for (TaskKind t : cfg.bench_tasks) {
          std::ifstream is(file);
          std::string tag, version, task;
          is >> tag >> version >> task;
          if (task != to_string(t)) continue;
          bm.indices.emplace(t, load_index(file, make_task(t).spec, models[i].dt()));
        }
      }
      for (TaskKind t : cfg.bench_tasks) {
        if (!bm.indices.count(t)) {
          throw ConfigError("bench.indices", "no " + std::string(to_string(t)) + " index for model " + paths[i]);
        }
      }
    }
    spec.models.push_back(std::move(bm));
  }
  spec.methods = cfg.bench_methods;
  spec.constraints = cfg.bench_constraints;
  spec.tasks = cfg.bench_tasks;
  spec.seeds = cfg.seeds;
  if (f.seed >= 0) spec.seeds = {static_cast<std::uint64_t>(f.seed)};
  spec.horizon = cfg.horizon;
  spec.run = cfg.run_options();
  spec.jobs = f.jobs;
  const std::vector<BenchRow> rows = benchmark(spec);
  auto os = open_out(fs::path(cfg.out) / "results.csv");
  write_results_header(os);
  for (const auto& r : rows) write_results_row(os, r);
  std::cout << "bench: " << rows.size() << " rows -> " << (fs::path(cfg.out) / "results.csv").string() << '\n';
  return 0;
}

int cmd_plot(const RunConfig& cfg, const Flags&) {
  require_path("plot.trajectory", cfg.trajectory, true);
  std::ifstream is(cfg.trajectory);
  const TrajectoryLog log = read_trajectory_csv(is);
  const Task task = make_task(cfg.task);
  const double dt = cfg.model.empty() ? 0.1 : input_model(cfg).dt();
  const fs::path out = fs::path(cfg.out) / (fs::path(cfg.trajectory).stem().string() + ".svg");
  auto os = open_out(out);
  write_svg(os, log, task.spec, dt, fs::path(cfg.trajectory).stem().string());
  std::cout << "plot -> " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bond: safe tracking with Bernstein-relaxed ReLU dynamics"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "key = value config file")->required();
  app.add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", f.seed, "override the seed")->check(CLI::NonNegativeNumber);
  app.add_option("--out", f.out, "output directory");
  app.fallthrough();
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"train", "fit an NNDM on unicycle samples"},
      {"bounds", "pre-activation bounds at one state"},
      {"synth", "synthesize the worst-case safety index"},
      {"run", "closed-loop trajectories"},
      {"bench", "grid of runs into one results CSV"},
      {"plot", "SVG of a trajectory CSV"}};
  for (const auto& [name, help] : cmds) app.add_subcommand(name, help);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    cfg = load_config(f.config);
    if (!f.out.empty()) cfg.set("out", f.out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    if (cmd == "train") return cmd_train(cfg, f);
    if (cmd == "bounds") return cmd_bounds(cfg, f);
    if (cmd == "synth") return cmd_synth(cfg, f);
    if (cmd == "run") return cmd_run(cfg, f);
    if (cmd == "bench") return cmd_bench(cfg, f);
    return cmd_plot(cfg, f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
