// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--only N[,M]] [--expect-fail N[,M]]
// Exit status is zero when every criterion outside the expected-fail list
// passes.

#include "bond/sim.hpp"
#include "bond/train.hpp"

#include <chrono>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace bond;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string str(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::set<int> parse_list(const char* s) {
  std::set<int> out;
  std::stringstream ss(s);
  for (std::string t; std::getline(ss, t, ',');) out.insert(std::stoi(t));
  return out;
}

// ---- shared fixtures ------------------------------------------------------

const NeuralDynamics& trained(const std::string& arch) {
  static std::map<std::string, NeuralDynamics> cache;
  auto it = cache.find(arch);
  if (it == cache.end()) {
    TrainConfig c;
    c.sizes = parse_arch(arch);
    it = cache.emplace(arch, train_on_unicycle(c).model).first;
  }
  return it->second;
}

struct Synthesized {
  SafetyIndex index;
  SynthReport report;
  SynthConfig config;
};

// Worst-case collision index on FC2-32, shared by criteria 6-9.
const Synthesized& synthesized() {
  static const Synthesized s = [] {
    const Task task = collision_task();
    SynthConfig c;
    c.region.center = task.spec.other.position(0.0);
    auto [idx, rep] = synthesize(trained("FC2-32"), task.spec, c);
    std::cout << "  synthesis: params " << rep.params.transpose() << " r " << rep.r << " r0 " << rep.r_unmargined
              << " eps " << rep.epsilon << " zeta " << idx.zeta() << " (" << str(rep.wall_time) << " s)\n";
    return Synthesized{idx, rep, c};
  }();
  return s;
}

double bernstein(double l, double u, int K, double z) {
  const double t = (z - l) / (u - l);
  double s = 0.0;
  for (int k = 0; k <= K; ++k) {
    double c = 1.0;
    for (int i = 1; i <= k; ++i) c = c * (K - k + i) / i;
    s += std::max(0.0, l + static_cast<double>(k) / K * (u - l)) * c * std::pow(t, k) * std::pow(1.0 - t, K - k);
  }
  return s;
}

// Pattern-enumeration optimum for a one-hidden-layer net (see test_solve).
double enumerate_patterns(const NeuralDynamics& m, const SafetyIndex& idx, const TaylorLayer& tl, const Vec& x,
                          const Vec& r, int p) {
  const Layer& L0 = m.layer(0);
  const Layer& L1 = m.layer(1);
  const int h = L0.rows();
  const double dt = m.dt();
  const double rhs = std::max(-idx.zeta(), idx.phi(x, 0.0) - idx.spec.gamma * dt - idx.zeta());
  const Box U = unicycle_control_box(), S = unicycle_state_box();
  double best = kInf;
  for (int pat = 0; pat < (1 << h); ++pat) {
    QpProblem q;
    const int u0 = q.add_var(U.lower[0], U.upper[0]), u1 = q.add_var(U.lower[1], U.upper[1]);
    std::vector<int> xn;
    for (int i = 0; i < 4; ++i) xn.push_back(q.add_var(S.lower[i], S.upper[i]));
    std::vector<double> c(h);
    for (int j = 0; j < h; ++j) {
      c[j] = L0.bias[j];
      for (int k = 0; k < 4; ++k) c[j] += L0.weight(j, k) * x[k];
      if (pat >> j & 1)
        q.add_le({{u0, -L0.weight(j, 4)}, {u1, -L0.weight(j, 5)}}, c[j]);
      else
        q.add_le({{u0, L0.weight(j, 4)}, {u1, L0.weight(j, 5)}}, -c[j]);
    }
    for (int i = 0; i < 4; ++i) {
      double a0 = 0, a1 = 0, rh = x[i] + dt * L1.bias[i];
      for (int j = 0; j < h; ++j) {
        if (!(pat >> j & 1)) continue;
        a0 += L1.weight(i, j) * L0.weight(j, 4);
        a1 += L1.weight(i, j) * L0.weight(j, 5);
        rh += dt * L1.weight(i, j) * c[j];
      }
      q.add_eq({{xn[i], 1}, {u0, -dt * a0}, {u1, -dt * a1}}, rh);
    }
    std::vector<Term> row;
    double rh = rhs - tl.bias;
    for (int i = 0; i < 4; ++i) {
      row.emplace_back(xn[i], tl.weight[i] / dt);
      rh += tl.weight[i] * x[i] / dt;
    }
    q.add_le(row, rh);
    double cst = 0;
    if (p == 2) {
      for (int i = 0; i < 4; ++i) {
        q.add_quadratic(xn[i], xn[i], 2);
        q.set_cost(xn[i], -2 * r[i]);
        cst += r[i] * r[i];
      }
    } else {
      for (int i = 0; i < 4; ++i) {
        const int t = q.add_var(0, kInf, 1);
        q.add_le({{xn[i], 1}, {t, -1}}, r[i]);
        q.add_le({{xn[i], -1}, {t, -1}}, -r[i]);
      }
    }
    const QpResult res = solve_qp(q);
    if (res.status == SolveStatus::Optimal) best = std::min(best, res.objective + cst);
  }
  return best;
}

struct Instance {
  NeuralDynamics model;
  SafetyIndex index;
  Vec x, r;
  StepOptions opt;
};

Instance random_instance(int s, std::mt19937_64& rng, const std::vector<int>& sizes = {6, 6, 4}) {
  Instance in{random_network(sizes, 4, 0.1, s), {}, sample_box(unicycle_state_box(), rng), {}, {}};
  const Vec g = sample_box(unicycle_state_box(), rng);
  in.r = in.x + (g - in.x) / 10;
  SafetySpec sp;
  sp.other.start = in.x.head<2>() + Eigen::Vector2d(0.6, 0.3);
  in.index = SafetyIndex(1, 0, 0, sp, 0.1);
  in.opt.p = 1 + s % 2;
  return in;
}

Box legal_input_box() {
  const Box xs = unicycle_state_box(), us = unicycle_control_box();
  Vec lo(6), hi(6);
  lo << xs.lower, us.lower;
  hi << xs.upper, us.upper;
  return {lo, hi};
}

// ---- criteria -------------------------------------------------------------

Verdict c1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> mag(1e-3, 20.0);
  long bad = 0;
  double worst_end = 0.0, worst_tri = 0.0;
  for (int s = 0; s < 1000; ++s) {
    const double l = -mag(rng), u = mag(rng);
    const BpoEnvelope g1 = build_envelope(l, u, 1), g2 = build_envelope(l, u, 2);
    const double tol = 1e-9 * (1.0 + u - l);
    worst_end = std::max({worst_end, std::abs(eval_upper(g1, l)), std::abs(eval_upper(g2, l)),
                          std::abs(eval_upper(g1, u) - u), std::abs(eval_upper(g2, u) - u)});
    for (int i = 0; i < 1000; ++i) {
      const double z = l + (u - l) * i / 999.0;
      const double v1 = eval_upper(g1, z), v2 = eval_upper(g2, z);
      worst_tri = std::max(worst_tri, std::abs(v1 - u * (z - l) / (u - l)));
      if (v2 < std::max(0.0, z) - tol || v2 > v1 + tol || std::abs(v2 - bernstein(l, u, 2, z)) > tol) ++bad;
    }
  }
  const double t = since(t0);
  const bool ok = bad == 0 && worst_end <= 1e-9 && worst_tri <= 1e-9 * 41 && t < 5.0;
  return {ok, "violations " + std::to_string(bad) + ", endpoint err " + str(worst_end) + ", triangle err " +
                  str(worst_tri) + ", " + str(t) + " s"};
}

Verdict c2() {
  const auto t0 = Clock::now();
  const Box box = legal_input_box();
  double escape = -kInf;
  int wider = 0;
  for (int s = 0; s < 20; ++s) {
    const std::vector<int> sizes = s < 10 ? std::vector<int>{6, 16, 4} : std::vector<int>{6, 16, 16, 4};
    const auto m = random_network(sizes, 4, 0.1, 500 + s);
    const LayerBounds ia = ia_bounds(m, box), du = dual_bounds(m, box);
    std::mt19937_64 rng(900 + s);
    for (int k = 0; k < 100000; ++k) {
      const Vec z = sample_box(box, rng);
      const auto pre = m.pre_activations(z);
      for (std::size_t i = 0; i < pre.size(); ++i) {
        escape = std::max({escape, (ia.lower[i] - pre[i]).maxCoeff(), (pre[i] - ia.upper[i]).maxCoeff(),
                           (du.lower[i] - pre[i]).maxCoeff(), (pre[i] - du.upper[i]).maxCoeff()});
      }
    }
    if ((du.upper.back() - du.lower.back()).mean() > (ia.upper.back() - ia.lower.back()).mean()) ++wider;
  }
  const double t = since(t0);
  return {escape <= 1e-9 && wider == 0 && t < 60.0,
          "max escape " + str(escape) + ", nets with dual wider " + std::to_string(wider) + ", " + str(t) + " s"};
}

Verdict c3() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  int bad = 0, feasible = 0;
  double gap = 0.0, xerr = 0.0;
  for (int s = 0; s < 50; ++s) {
    const Instance in = random_instance(s, rng);
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    const StepSolution mip = solve_step(ctx, Method::MIP, in.x, in.r, in.opt);
    const double e = enumerate_patterns(in.model, in.index, taylor_layer(in.index, in.x, 0), in.x, in.r, in.opt.p);
    if (std::isinf(e)) {
      bad += mip.status != SolveStatus::Infeasible;
      continue;
    }
    if (!mip.ok()) {
      ++bad;
      continue;
    }
    ++feasible;
    gap = std::max(gap, std::abs(mip.objective - e));
    xerr = std::max(xerr, (mip.x_next - in.model.euler_step(in.x, mip.u)).cwiseAbs().maxCoeff());
  }
  const double t = since(t0);
  return {bad == 0 && gap <= 1e-7 && xerr <= 1e-6 && t < 120.0,
          std::to_string(feasible) + " feasible, status mismatches " + std::to_string(bad) + ", max objective gap " +
              str(gap) + ", max next-state err " + str(xerr) + ", " + str(t) + " s"};
}

Verdict c4() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  int ordered = 0;
  for (int s = 0; s < 100; ++s) {
    const Instance in = random_instance(s, rng);
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    ordered += relaxation_ordering_audit(ctx, in.x, in.r, in.opt).ordered;
  }
  // benchmark grid: models x tasks, plain constraint, short horizons
  int cells = 0, good = 0;
  std::ostringstream grid;
  for (const std::string arch : {"FC2-8", "FC2-16", "FC2-32", "FC3-8", "FC3-16"}) {
    const NeuralDynamics& m = trained(arch);
    for (TaskKind k : {TaskKind::CollisionAvoidance, TaskKind::SafeFollowing}) {
      Task task = make_task(k);
      task.horizon = arch.rfind("FC3", 0) == 0 ? 15 : 30;
      const SafetyIndex idx = plain_index(task.spec, m.dt());
      double err[3] = {0, 0, 0};
      const Method ms[3] = {Method::MIP, Method::BPO2, Method::BPO1};
      for (int i = 0; i < 3; ++i)
        for (std::uint64_t seed : {1, 2}) err[i] += run_trajectory(m, idx, ms[i], task, seed).mean_err / 2;
      // differences below the solver tolerance are ties
      const bool ok = err[0] < err[1] + 1e-9 && err[1] <= err[2] + 1e-9;
      ++cells;
      good += ok;
      grid << "\n    " << arch << ' ' << to_string(k) << ": mip " << str(err[0]) << " bpo2 " << str(err[1]) << " bpo1 "
           << str(err[2]) << (ok ? "" : "  (out of order)");
    }
  }
  const double t = since(t0);
  return {ordered >= 95 && good >= 0.9 * cells,
          "ordering " + std::to_string(ordered) + "/100, error ordering " + std::to_string(good) + "/" +
              std::to_string(cells) + " cells, " + str(t) + " s" + grid.str()};
}

Verdict c5() {
  const auto t0 = Clock::now();
  const int widths[3] = {16, 32, 64};
  double tm[3][3];  // width x {mip, bpo2, bpo1}
  std::ostringstream os;
  const Task task = collision_task();
  for (int w = 0; w < 3; ++w) {
    const NeuralDynamics& m = trained("FC3-" + std::to_string(widths[w]));
    const SafetyIndex idx = plain_index(task.spec, m.dt());
    const Method ms[3] = {Method::MIP, Method::BPO2, Method::BPO1};
    int nodes = 0, budget = 0;
    const int n_states = 3;
    for (int i = 0; i < 3; ++i) {
      tm[w][i] = 0.0;
      for (int s = 0; s < n_states; ++s) {
        const Vec x = task.initial_state(static_cast<std::uint64_t>(s + 1));
        const StepContext ctx{&m, &idx, BoundsMethod::DUAL, 0.1};
        StepOptions o;
        const StepSolution sol = solve_step(ctx, ms[i], x, reference(x, task.goal), o);
        tm[w][i] += sol.solve_time / n_states;
        if (i == 0) {
          nodes += sol.nodes;
          budget += sol.status == SolveStatus::BudgetExceeded;
        }
      }
    }
    os << "\n    FC3-" << widths[w] << ": mip " << str(tm[w][0]) << " s (" << nodes / n_states << " nodes, " << budget
       << " at budget), bpo2 " << str(tm[w][1]) << " s, bpo1 " << str(tm[w][2]) << " s";
  }
  auto slope = [&](int i) { return std::log(tm[2][i] / tm[0][i]) / std::log(4.0); };
  const double s_mip = slope(0), s_bpo1 = slope(2);
  const bool speed = tm[2][2] <= 0.1 * tm[2][0];
  const bool order = tm[2][2] < tm[2][1] && tm[2][1] < tm[2][0];
  const bool scaling = s_mip > 1.0 && s_mip > s_bpo1;
  const double t = since(t0);
  return {speed && order && scaling, "FC3-64 bpo1/mip " + str(tm[2][2] / tm[2][0]) + ", ordering " +
                                         (order ? "ok" : "violated") + ", log-log slope mip " + str(s_mip) +
                                         " bpo1 " + str(s_bpo1) + ", " + str(t) + " s" + os.str()};
}

Verdict c6() {
  const auto t0 = Clock::now();
  const Synthesized& syn = synthesized();
  const NeuralDynamics& m = trained("FC2-32");
  const Task task = collision_task();
  bool safe = true;
  int plain_violations = 0;
  std::ostringstream os;
  for (Method me : {Method::BPO1, Method::BPO2}) {
    double min_wc = kInf, min_plain = kInf;
    int fb = 0, pv = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const TrajectoryLog wc = run_trajectory(m, syn.index, me, task, seed);
      min_wc = std::min(min_wc, wc.min_dist);
      fb += wc.fallbacks;
      const TrajectoryLog pl = run_trajectory(m, plain_index(task.spec, m.dt()), me, task, seed);
      min_plain = std::min(min_plain, pl.min_dist);
      pv += pl.min_dist < task.spec.d_min;
    }
    safe = safe && min_wc >= task.spec.d_min && fb == 0;
    plain_violations += pv;
    os << "\n    " << to_string(me) << ": worst_case min dist " << str(min_wc) << ", fallbacks " << fb
       << "; plain min dist " << str(min_plain) << ", violating seeds " << pv;
  }
  const double t = since(t0);
  return {safe && plain_violations >= 1 && t < 600.0,
          "synthesis + 40 trajectories " + str(t) + " s (synthesis certified: " +
              (syn.report.certified ? "yes" : "no") + ")" + os.str()};
}

Verdict c7() {
  const Synthesized& syn = synthesized();
  const NeuralDynamics& m = trained("FC2-32");
  StateRegion fresh = syn.config.region;
  const auto states = sample_states(fresh, 1000, syn.config.seed + 7777);
  int fail = 0;
  for (const Vec& x : states)
    fail += !is_feasible(x, syn.index, m, syn.config.bounds_method, syn.config.controls, syn.config.grid, 0.0).feasible;
  const bool reached = syn.report.r == 0.0;
  return {reached && fail == 0, std::string("synthesis r ") + str(syn.report.r) + " (needs 0) with eps " +
                                    str(syn.index.epsilon) + ", delta " + str(syn.report.delta) + ", delta_f " +
                                    str(syn.index.delta_f) + "; fresh states without a feasible control " +
                                    std::to_string(fail) + "/1000"};
}

Verdict c8() {
  const Synthesized& syn = synthesized();
  const NeuralDynamics& m = trained("FC2-32");
  const SafetyIndex& idx = syn.index;
  std::mt19937_64 rng(4242);
  const double zeta = idx.zeta(), dt = m.dt();
  int bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Vec x = syn.config.region.sample(rng), u = sample_box(syn.config.controls, rng);
    const Vec f = m.forward(x, u);
    const double rem = std::abs(idx.phi(x + f * dt, 0.0) - (idx.phi(x, 0.0) + idx.grad(x, 0.0).dot(f) * dt));
    worst = std::max(worst, rem / zeta);
    bad += rem > zeta;
  }
  return {bad == 0, "violations " + std::to_string(bad) + "/10000, largest remainder / zeta " + str(worst) +
                        " (M_f " + str(idx.M_f) + ", M_phi " + str(idx.M_phi) + ", zeta " + str(zeta) + ")"};
}

Verdict c9() {
  const Synthesized& syn = synthesized();
  const SafetyIndex& idx = syn.index;
  std::mt19937_64 rng(77);
  double g_err = 0.0, h_err = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Vec x = syn.config.region.sample(rng);
    const Vec g = idx.grad(x, 0.0);
    const Mat H = idx.hessian(x, 0.0);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[k]));
      Vec a = x, b = x;
      a[k] += h;
      b[k] -= h;
      const double fd = (idx.phi(a, 0.0) - idx.phi(b, 0.0)) / (2 * h);
      g_err = std::max(g_err, std::abs(fd - g[k]) / std::max(1.0, std::abs(g[k])));
      const Vec fdh = (idx.grad(a, 0.0) - idx.grad(b, 0.0)) / (2 * h);
      for (int j = 0; j < 4; ++j) h_err = std::max(h_err, std::abs(fdh[j] - H(j, k)) / std::max(1.0, std::abs(H(j, k))));
    }
  }
  // solver residuals and feasibility on random step problems
  std::mt19937_64 r2(31);
  double kkt = 0.0, viol = 0.0;
  for (int s = 0; s < 60; ++s) {
    const Instance in = random_instance(700 + s, r2, s % 2 ? std::vector<int>{6, 16, 4} : std::vector<int>{6, 8, 8, 4});
    const LayerBounds b = compute_bounds(in.model, per_step_box(in.x, in.opt.controls), BoundsMethod::DUAL);
    const TaylorLayer tl = taylor_layer(in.index, in.x, 0);
    for (int K : {1, 2}) {
      StepOptions o = in.opt;
      o.K = K;
      const StepProblem sp = assemble(in.model, b, build_envelopes(b, K), tl, in.index, in.x, in.r, o);
      const StepSolution sol = K == 1 ? solve_lp_qp(sp) : solve_qclp(sp, in.model, o);
      if (!sol.ok()) continue;
      if (K == 1) kkt = std::max(kkt, sol.kkt_residual);
      viol = std::max(viol, sp.max_violation(sol.values));
    }
    const StepProblem mp = assemble_mip(in.model, b, tl, in.index, in.x, in.r, in.opt);
    const StepSolution ms = solve_mip(mp, in.model, in.opt);
    if (ms.ok()) viol = std::max(viol, mp.max_violation(ms.values));
  }
  // reruns
  bool same = true;
  const NeuralDynamics& m = trained("FC2-16");
  Task task = collision_task();
  task.horizon = 40;
  for (Method me : {Method::MIP, Method::BPO1, Method::BPO2}) {
    std::ostringstream a, b;
    write_trajectory_csv(a, run_trajectory(m, plain_index(task.spec, 0.1), me, task, 3));
    write_trajectory_csv(b, run_trajectory(m, plain_index(task.spec, 0.1), me, task, 3));
    same = same && a.str() == b.str();
  }
  SynthConfig small = syn.config;
  small.sample_count = 300;
  small.generations = 2;
  small.population = 6;
  const auto s1 = synthesize(m, task.spec, small).second, s2 = synthesize(m, task.spec, small).second;
  same = same && s1.params == s2.params && s1.r == s2.r && s1.epsilon == s2.epsilon;
  return {g_err <= 1e-5 && h_err <= 1e-4 && kkt <= 1e-8 && viol <= 1e-6 && same,
          "grad rel err " + str(g_err) + ", hessian rel err " + str(h_err) + ", max KKT " + str(kkt) +
              ", max violation " + str(viol) + ", reruns " + (same ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, expect_fail;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--only") && i + 1 < argc) only = parse_list(argv[++i]);
    else if (!std::strcmp(argv[i], "--expect-fail") && i + 1 < argc) expect_fail = parse_list(argv[++i]);
    else {
      std::cerr << "usage: acceptance [--only N,..] [--expect-fail N,..]\n";
      return 2;
    }
  }
  const std::vector<std::pair<std::string, Verdict (*)()>> criteria = {
      {"BPO soundness and shape", c1},
      {"bounds soundness and tightness", c2},
      {"MIP exactness", c3},
      {"relaxation containment and error ordering", c4},
      {"speedup ordering", c5},
      {"safety with the synthesized index", c6},
      {"feasibility transfer to fresh states", c7},
      {"Taylor remainder bound", c8},
      {"numerical hygiene", c9}};
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const bool expected = expect_fail.count(n) > 0;
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << " " << criteria[i].first << " -- "
              << v.detail << (expected && !v.pass ? "  [expected failure]" : "") << std::endl;
    if (!v.pass && !expected) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
