#pragma once

#include "bond/step.hpp"
#include "bond/synth.hpp"

#include <iomanip>
#include <map>

namespace bond {

struct Task {
  TaskKind kind = TaskKind::CollisionAvoidance;
  Vec goal;
  SafetySpec spec;
  int horizon = 100;
  Vec start;         // mean initial state
  Vec start_spread;  // half-width of the uniform initial perturbation

  void validate() const {
    const Box X = unicycle_state_box();
    if (!X.contains(goal)) throw Error("task: goal outside the legal state box");
    const Vec o = spec.other.position(0.0);
    if (std::abs(o[0]) > X.upper[0] || std::abs(o[1]) > X.upper[1]) throw Error("task: obstacle outside the legal box");
    if (horizon < 1) throw Error("task: horizon must be positive");
    spec.validate();
  }

  Vec initial_state(std::uint64_t seed) const {
    std::mt19937_64 rng(seed * 7919 + 17);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Vec x = start;
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += start_spread[i] * uni(rng);
    return x;
  }
};

// Static obstacle at the origin between start and goal.
inline Task collision_task() {
  Task t;
  t.kind = TaskKind::CollisionAvoidance;
  t.spec.task = TaskKind::CollisionAvoidance;
  t.goal = (Vec(4) << 6.0, 0.0, 1.0, 0.0).finished();
  t.start = (Vec(4) << -4.0, 0.0, 1.0, 0.0).finished();
  t.start_spread = (Vec(4) << 0.3, 0.3, 0.0, 0.05).finished();
  return t;
}

// Target moving along +x at 0.5 m/s; the goal pulls the robot past it.
inline Task following_task() {
  Task t;
  t.kind = TaskKind::SafeFollowing;
  t.spec.task = TaskKind::SafeFollowing;
  t.spec.other.start = Eigen::Vector2d(-4.0, 0.0);
  t.spec.other.velocity = Eigen::Vector2d(0.5, 0.0);
  t.goal = (Vec(4) << 3.0, 0.0, 0.5, 0.0).finished();
  t.start = (Vec(4) << -5.5, 0.0, 0.5, 0.0).finished();
  t.start_spread = (Vec(4) << 0.1, 0.3, 0.0, 0.1).finished();
  return t;
}

inline Task make_task(TaskKind k) { return k == TaskKind::CollisionAvoidance ? collision_task() : following_task(); }

inline Vec reference(const Vec& x, const Vec& goal) { return x + (goal - x) / 10.0; }

// Unsynthesized index phi0 with no Taylor margin: the plain constraint.
inline SafetyIndex plain_index(const SafetySpec& spec, double dt) { return SafetyIndex(1.0, 0.0, 0.0, spec, dt); }

inline double step_error(const Vec& a, const Vec& b, int p) {
  return p == 1 ? (a - b).lpNorm<1>() : (a - b).norm();
}

struct StepRecord {
  int step = 0;
  double t = 0.0;
  Vec x, u, x_pred, x_next;
  double phi = 0.0;
  double dist = 0.0;
  SolveStatus status = SolveStatus::Optimal;
  bool fallback = false;
  double solve_time = 0.0;
  double err_l1 = 0.0, err_l2 = 0.0;
};

struct TrajectoryLog {
  std::vector<StepRecord> steps;
  Vec final_state;
  double final_dist = 0.0;
  int p = 2;
  double mean_err = 0.0;
  double mean_time = 0.0;
  double min_dist = kInf;
  double max_dist = 0.0;
  int fallbacks = 0;
};

struct RunOptions {
  int p = 2;
  BoundsMethod bounds_method = BoundsMethod::DUAL;
  int fallback_grid = 33;
  StepOptions step;
};

// Control on a grid over the control box minimizing phi at the exact next
// state; controls keeping the next state in the legal box come first.
inline Vec safest_control(const NeuralDynamics& model, const SafetyIndex& index, const Vec& x, double t_next,
                          const Box& controls, int grid, const Box& states = unicycle_state_box()) {
  Vec best = controls.mid();
  double best_v = kInf;
  bool best_in = false;
  for (const Vec& u : control_grid(controls, grid)) {
    const Vec xn = model.euler_step(x, u);
    if ((xn.head<2>() - index.spec.other.position(t_next)).squaredNorm() == 0.0) continue;
    const double v = index.phi(xn, t_next);
    const bool in = states.contains(xn);
    if ((in && !best_in) || (in == best_in && v < best_v)) {
      best_in = in;
      best_v = v;
      best = u;
    }
  }
  return best;
}

inline TrajectoryLog run_trajectory(const NeuralDynamics& model, const SafetyIndex& index, Method method,
                                    const Task& task, std::uint64_t seed, const RunOptions& opt = {}) {
  task.validate();
  if (model.state_dim() != 4 || model.control_dim() != 2) {
    throw DimensionError("run_trajectory: the unicycle tasks need a model with 4 states and 2 controls");
  }
  if (index.spec.task != task.kind) throw Error("run_trajectory: index task does not match the task");
  if (std::abs(index.dt - model.dt()) > 1e-15) throw Error("run_trajectory: index dt differs from model dt");
  TrajectoryLog log;
  log.p = opt.p;
  StepOptions so = opt.step;
  so.p = opt.p;
  Vec x = task.initial_state(seed);
  const double dt = model.dt();
  double err_sum = 0.0;
  int solved = 0;
  for (int k = 0; k < task.horizon; ++k) {
    StepRecord r;
    r.step = k;
    r.t = k * dt;
    r.x = x;
    r.dist = distance_to_other(task.spec, x, r.t);
    r.phi = index.phi(x, r.t);
    const Vec xr = reference(x, task.goal);
    StepContext ctx{&model, &index, opt.bounds_method, r.t + dt};
    const StepSolution s = solve_step(ctx, method, x, xr, so);
    r.status = s.status;
    r.solve_time = s.solve_time;
    if (s.ok() || (s.status == SolveStatus::BudgetExceeded && s.u.size() == 2)) {
      r.u = s.u;
      r.x_pred = s.x_next;
    } else {
      r.fallback = true;
      ++log.fallbacks;
      r.u = safest_control(model, index, x, r.t + dt, so.controls, opt.fallback_grid);
      BOND_LOG_INFO("step " << k << ": solver " << to_string(s.status) << ", safest-grid fallback u=" << r.u.transpose());
    }
    r.x_next = model.euler_step(x, r.u);
    if (!r.fallback) {
      r.err_l1 = step_error(r.x_pred, r.x_next, 1);
      r.err_l2 = step_error(r.x_pred, r.x_next, 2);
      err_sum += opt.p == 1 ? r.err_l1 : r.err_l2;
      ++solved;
    } else {
      r.x_pred = r.x_next;
    }
    log.mean_time += r.solve_time;
    log.min_dist = std::min(log.min_dist, r.dist);
    log.max_dist = std::max(log.max_dist, r.dist);
    x = r.x_next;
    log.steps.push_back(std::move(r));
  }
  log.final_state = x;
  log.final_dist = distance_to_other(task.spec, x, task.horizon * dt);
  log.min_dist = std::min(log.min_dist, log.final_dist);
  log.max_dist = std::max(log.max_dist, log.final_dist);
  log.mean_err = solved ? err_sum / solved : 0.0;
  log.mean_time /= task.horizon;
  return log;
}

// Replays the executed controls from the initial state.
inline double replay_mismatch(const NeuralDynamics& model, const TrajectoryLog& log) {
  if (log.steps.empty()) return 0.0;
  Vec x = log.steps.front().x;
  double m = 0.0;
  for (const StepRecord& r : log.steps) {
    x = model.euler_step(x, r.u);
    m = std::max(m, (x - r.x_next).cwiseAbs().maxCoeff());
  }
  return m;
}

inline void write_trajectory_csv(std::ostream& os, const TrajectoryLog& log) {
  using detail::fmt17;
  os << "step,t,px,py,v,theta,a,omega,pred_px,pred_py,pred_v,pred_theta,next_px,next_py,next_v,next_theta,phi,dist,"
        "status,fallback,err_l1,err_l2\n";
  for (const StepRecord& r : log.steps) {
    os << r.step << ',' << fmt17(r.t);
    for (Eigen::Index i = 0; i < r.x.size(); ++i) os << ',' << fmt17(r.x[i]);
    for (Eigen::Index i = 0; i < r.u.size(); ++i) os << ',' << fmt17(r.u[i]);
    for (Eigen::Index i = 0; i < r.x_pred.size(); ++i) os << ',' << fmt17(r.x_pred[i]);
    for (Eigen::Index i = 0; i < r.x_next.size(); ++i) os << ',' << fmt17(r.x_next[i]);
    os << ',' << fmt17(r.phi) << ',' << fmt17(r.dist) << ',' << to_string(r.status) << ',' << (r.fallback ? 1 : 0)
       << ',' << fmt17(r.err_l1) << ',' << fmt17(r.err_l2) << '\n';
  }
}

// Per-step wall times live apart from the trajectory so that the trajectory
// file is reproducible byte for byte.
inline void write_timing_csv(std::ostream& os, const TrajectoryLog& log) {
  os << "step,solve_time_s\n";
  for (const StepRecord& r : log.steps) os << r.step << ',' << r.solve_time << '\n';
}

struct BenchRow {
  std::string model;
  Method method = Method::BPO1;
  ConstraintMode constraint = ConstraintMode::WorstCase;
  TaskKind task = TaskKind::CollisionAvoidance;
  std::uint64_t seed = 0;
  double mean_err = 0.0;
  double mean_time = 0.0;
  double min_dist = 0.0;
  int fallbacks = 0;
};

inline void write_results_header(std::ostream& os) {
  os << "model,method,constraint,task,seed,mean_err,mean_time_s,min_dist,fallbacks\n";
}

inline void write_results_row(std::ostream& os, const BenchRow& r) {
  using detail::fmt17;
  os << r.model << ',' << to_string(r.method) << ',' << to_string(r.constraint) << ',' << to_string(r.task) << ','
     << r.seed << ',' << fmt17(r.mean_err) << ',' << std::setprecision(6) << r.mean_time << ',' << fmt17(r.min_dist)
     << ',' << r.fallbacks << '\n';
}

struct BenchModel {
  std::string name;
  const NeuralDynamics* model = nullptr;
  // index per task for the worst-case constraint; plain uses phi0
  std::map<TaskKind, SafetyIndex> indices;
};

struct BenchSpec {
  std::vector<BenchModel> models;
  std::vector<Method> methods;
  std::vector<ConstraintMode> constraints;
  std::vector<TaskKind> tasks;
  std::vector<std::uint64_t> seeds;
  int horizon = 100;
  RunOptions run;
  int jobs = 1;
};

inline std::vector<BenchRow> benchmark(const BenchSpec& spec) {
  struct Job {
    std::size_t model;
    Method method;
    ConstraintMode constraint;
    TaskKind task;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < spec.models.size(); ++m)
    for (TaskKind t : spec.tasks)
      for (ConstraintMode c : spec.constraints)
        for (Method me : spec.methods)
          for (std::uint64_t s : spec.seeds) jobs.push_back({m, me, c, t, s});
  std::vector<BenchRow> rows(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), spec.jobs, [&](int i) {
    const Job& j = jobs[i];
    const BenchModel& bm = spec.models[j.model];
    Task task = make_task(j.task);
    task.horizon = spec.horizon;
    SafetyIndex index = plain_index(task.spec, bm.model->dt());
    if (j.constraint == ConstraintMode::WorstCase) {
      const auto it = bm.indices.find(j.task);
      if (it == bm.indices.end()) throw Error("benchmark: no safety index for task " + std::string(to_string(j.task)));
      index = it->second;
      index.spec.other = task.spec.other;
    }
    const TrajectoryLog log = run_trajectory(*bm.model, index, j.method, task, j.seed, spec.run);
    rows[i] = {bm.name, j.method, j.constraint, j.task, j.seed, log.mean_err, log.mean_time,
               log.min_dist, log.fallbacks};
  });
  return rows;
}

// Static SVG of one trajectory: executed path, predicted states, and the
// unsafe region (obstacle disc, or the annulus around the target's final
// position with the target's path).
inline void write_svg(std::ostream& os, const TrajectoryLog& log, const SafetySpec& spec, double dt,
                      const std::string& title = "") {
  double lo_x = kInf, lo_y = kInf, hi_x = -kInf, hi_y = -kInf;
  auto grow = [&](double x, double y) {
    lo_x = std::min(lo_x, x);
    hi_x = std::max(hi_x, x);
    lo_y = std::min(lo_y, y);
    hi_y = std::max(hi_y, y);
  };
  for (const StepRecord& r : log.steps) {
    grow(r.x[0], r.x[1]);
    grow(r.x_next[0], r.x_next[1]);
  }
  const double t_end = log.steps.empty() ? 0.0 : (log.steps.size()) * dt;
  const Eigen::Vector2d o0 = spec.other.position(0.0), o1 = spec.other.position(t_end);
  const double reach = spec.task == TaskKind::CollisionAvoidance ? spec.d_min : spec.ring_outer;
  grow(o0.x() - reach, o0.y() - reach);
  grow(o0.x() + reach, o0.y() + reach);
  grow(o1.x() - reach, o1.y() - reach);
  grow(o1.x() + reach, o1.y() + reach);
  const double pad = 0.5, W = 640.0;
  lo_x -= pad, lo_y -= pad, hi_x += pad, hi_y += pad;
  const double scale = W / std::max(hi_x - lo_x, hi_y - lo_y);
  const double H = (hi_y - lo_y) * scale;
  auto X = [&](double x) { return (x - lo_x) * scale; };
  auto Y = [&](double y) { return H - (y - lo_y) * scale; };
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (spec.task == TaskKind::CollisionAvoidance) {
    os << "<circle cx=\"" << X(o0.x()) << "\" cy=\"" << Y(o0.y()) << "\" r=\"" << spec.d_min * scale
       << "\" fill=\"#f4a6a6\" stroke=\"#c03030\"/>\n";
  } else {
    os << "<line x1=\"" << X(o0.x()) << "\" y1=\"" << Y(o0.y()) << "\" x2=\"" << X(o1.x()) << "\" y2=\"" << Y(o1.y())
       << "\" stroke=\"#c03030\" stroke-dasharray=\"4 3\"/>\n";
    os << "<circle cx=\"" << X(o1.x()) << "\" cy=\"" << Y(o1.y()) << "\" r=\"" << spec.ring_outer * scale
       << "\" fill=\"#d8f0d8\" stroke=\"#308030\"/>\n";
    os << "<circle cx=\"" << X(o1.x()) << "\" cy=\"" << Y(o1.y()) << "\" r=\"" << spec.ring_inner * scale
       << "\" fill=\"#f4a6a6\" stroke=\"#c03030\"/>\n";
  }
  if (!log.steps.empty()) {
    os << "<polyline fill=\"none\" stroke=\"#1f4fa0\" stroke-width=\"2\" points=\"";
    os << X(log.steps.front().x[0]) << ',' << Y(log.steps.front().x[1]);
    for (const StepRecord& r : log.steps) os << ' ' << X(r.x_next[0]) << ',' << Y(r.x_next[1]);
    os << "\"/>\n";
    for (const StepRecord& r : log.steps) {
      os << "<circle cx=\"" << X(r.x_pred[0]) << "\" cy=\"" << Y(r.x_pred[1]) << "\" r=\"1.5\" fill=\""
         << (r.fallback ? "#e08000" : "#7090d0") << "\"/>\n";
    }
  }
  if (!title.empty()) os << "<text x=\"8\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  os << "</svg>\n";
}

// Reads back the trajectory CSV written by write_trajectory_csv.
inline TrajectoryLog read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("step,", 0) != 0) throw FormatError("trajectory csv: missing header");
  TrajectoryLog log;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 22) throw FormatError("trajectory csv: line " + std::to_string(lineno) + " has wrong field count");
    StepRecord r;
    auto num = [&](int i) { return detail::parse_double(f[i], "trajectory field"); };
    r.step = static_cast<int>(detail::parse_int(f[0], "step"));
    r.t = num(1);
    r.x = (Vec(4) << num(2), num(3), num(4), num(5)).finished();
    r.u = (Vec(2) << num(6), num(7)).finished();
    r.x_pred = (Vec(4) << num(8), num(9), num(10), num(11)).finished();
    r.x_next = (Vec(4) << num(12), num(13), num(14), num(15)).finished();
    r.phi = num(16);
    r.dist = num(17);
    r.status = parse_status(f[18]);
    r.fallback = f[19] == "1";
    r.err_l1 = num(20);
    r.err_l2 = num(21);
    log.steps.push_back(std::move(r));
  }
  return log;
}

}  // namespace bond
