#pragma once

#include "bond/bpo.hpp"
#include "bond/qp.hpp"
#include "bond/safety.hpp"

#include <chrono>
#include <queue>

namespace bond {

enum class Method { MIP, BPO1, BPO2 };
enum class ConstraintMode { Plain, WorstCase };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::MIP: return "mip";
    case Method::BPO1: return "bpo1";
    case Method::BPO2: return "bpo2";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "mip" || s == "MIP") return Method::MIP;
  if (s == "bpo1" || s == "BPO-1" || s == "bpo-1") return Method::BPO1;
  if (s == "bpo2" || s == "BPO-2" || s == "bpo-2") return Method::BPO2;
  throw Error("unknown method '" + s + "' (expected mip, bpo1 or bpo2)");
}

inline const char* to_string(ConstraintMode m) { return m == ConstraintMode::Plain ? "plain" : "worst_case"; }

inline ConstraintMode parse_constraint(const std::string& s) {
  if (s == "plain") return ConstraintMode::Plain;
  if (s == "worst_case" || s == "worst-case" || s == "wc") return ConstraintMode::WorstCase;
  throw Error("unknown constraint mode '" + s + "' (expected plain or worst_case)");
}

struct StepOptions {
  int p = 2;
  int K = 1;
  bool safety = true;
  Box controls = unicycle_control_box();
  bool bound_states = true;  // keep the hallucinated next state in the legal box
  Box states = unicycle_state_box();
  IpmOptions ipm;
  int max_nodes = 5000;
  int ccp_iterations = 50;
  double ccp_tolerance = 1e-6;
};

// Affine expression sum(terms) + constant.
struct Expr {
  std::vector<Term> terms;
  double constant = 0.0;

  double at(const Vec& v) const { return QpProblem::row_dot(terms, v) + constant; }
};

// A per-neuron quadratic upper envelope z <= c0 + c1 zhat + c2 zhat^2 kept
// outside the QP and enforced through linearized rows.
struct QuadraticRow {
  int le_row = -1;
  int z_var = -1;
  Expr zhat;
  BpoEnvelope envelope;
};

struct ConstraintCounts {
  int unstable = 0;
  int stable = 0;
  int neuron_rows = 0;  // rows owned by hidden neurons
  int coupling = 0;     // next-state equalities
  int safety = 0;
  int objective = 0;    // auxiliary rows of the l1 objective
};

struct StepProblem {
  QpProblem qp;
  int p = 2;
  int K = 1;
  Vec x_k, x_ref;
  std::vector<int> u_vars;
  std::vector<int> x_vars;
  std::vector<std::vector<int>> z_vars;
  std::vector<std::vector<Expr>> zhat;
  std::vector<std::vector<int>> a_vars;  // big-M binaries, -1 if none
  std::vector<QuadraticRow> quadratic;
  std::vector<std::vector<Term>> safety_row;
  double objective_constant = 0.0;
  double safety_rhs = 0.0;
  ConstraintCounts counts;
  IpmOptions ipm;

  double objective(const Vec& v) const { return qp.objective(v) + objective_constant; }

  Vec u_of(const Vec& v) const {
    Vec u(u_vars.size());
    for (std::size_t i = 0; i < u_vars.size(); ++i) u[i] = v[u_vars[i]];
    return u;
  }
  Vec x_next_of(const Vec& v) const {
    Vec x(x_vars.size());
    for (std::size_t i = 0; i < x_vars.size(); ++i) x[i] = v[x_vars[i]];
    return x;
  }

  // Violation of the linear rows plus the true quadratic envelopes.
  double max_violation(const Vec& v) const {
    double m = qp.max_violation(v);
    for (const QuadraticRow& q : quadratic) m = std::max(m, v[q.z_var] - eval_poly(q.envelope.coeffs, q.zhat.at(v)));
    return m;
  }

  // Variable vector for control u with hidden values from the exact forward
  // pass (binaries set from the activation pattern).
  Vec exact_point(const NeuralDynamics& model, const Vec& u) const {
    Vec v = Vec::Zero(qp.num_vars());
    for (std::size_t i = 0; i < u_vars.size(); ++i) v[u_vars[i]] = u[i];
    const std::vector<Vec> pre = model.pre_activations(model.join(x_k, u));
    for (std::size_t i = 0; i < z_vars.size(); ++i)
      for (std::size_t j = 0; j < z_vars[i].size(); ++j) {
        v[z_vars[i][j]] = std::max(0.0, pre[i][static_cast<Eigen::Index>(j)]);
        if (!a_vars.empty() && a_vars[i][j] >= 0) v[a_vars[i][j]] = pre[i][static_cast<Eigen::Index>(j)] > 0.0 ? 1.0 : 0.0;
      }
    const Vec xn = x_k + model.dt() * pre.back();
    for (std::size_t i = 0; i < x_vars.size(); ++i) v[x_vars[i]] = xn[static_cast<Eigen::Index>(i)];
    aux_fill(v);
    return v;
  }

  void aux_fill(Vec& v) const {
    if (p != 1) return;
    for (std::size_t i = 0; i < t_vars.size(); ++i) v[t_vars[i]] = std::abs(v[x_vars[i]] - x_ref[static_cast<Eigen::Index>(i)]);
  }

  std::vector<int> t_vars;
};

struct StepSolution {
  SolveStatus status = SolveStatus::Infeasible;
  Vec u;
  Vec x_next;
  Vec values;
  double objective = kInf;
  double solve_time = 0.0;
  int iterations = 0;
  int nodes = 0;
  double kkt_residual = kInf;

  bool ok() const { return status == SolveStatus::Optimal || status == SolveStatus::LocallyOptimal; }
};

inline double safety_rhs(const SafetyIndex& index, double phi_k) {
  const double z = index.zeta();
  return std::max(-z, phi_k - index.spec.gamma * index.dt - z);
}

namespace detail {

enum class Encoding { Bpo, BigM };

inline void check_fresh(const LayerBounds& bounds, const Vec& x_k, const Box& controls) {
  const InputBox need = per_step_box(x_k, controls);
  if (bounds.box.dim() != need.dim()) throw DimensionError("step problem: bounds box has wrong dimension");
  const double tol = 1e-12;
  for (Eigen::Index i = 0; i < need.dim(); ++i) {
    if (bounds.box.lower[i] > need.lower[i] + tol || bounds.box.upper[i] < need.upper[i] - tol) {
      throw Error("step problem: stale bounds, box does not contain the current state and control set (coordinate " +
                  std::to_string(i) + ")");
    }
  }
}

inline StepProblem build(const NeuralDynamics& model, const LayerBounds& bounds, const EnvelopeSet* envelopes,
                         const TaylorLayer& taylor, const SafetyIndex& index, const Vec& x_k, const Vec& x_ref,
                         const StepOptions& opt, Encoding enc) {
  if (opt.p != 1 && opt.p != 2) throw Error("step problem: p must be 1 or 2");
  if (opt.K != 1 && opt.K != 2) throw Error("step problem: K must be 1 or 2");
  const int mx = model.state_dim(), mu = model.control_dim();
  if (x_k.size() != mx || x_ref.size() != mx) throw DimensionError("step problem: state size mismatch");
  if (opt.controls.dim() != mu) throw DimensionError("step problem: control box size mismatch");
  check_fresh(bounds, x_k, opt.controls);
  if (enc == Encoding::Bpo) {
    if (!envelopes || envelopes->size() + 1 != model.num_layers()) throw Error("step problem: envelopes do not match model");
  }

  StepProblem sp;
  sp.p = opt.p;
  sp.K = enc == Encoding::Bpo ? opt.K : 1;
  sp.x_k = x_k;
  sp.x_ref = x_ref;
  sp.ipm = opt.ipm;
  QpProblem& qp = sp.qp;
  if (opt.bound_states && opt.states.dim() != mx) throw DimensionError("step problem: state box size mismatch");
  for (int i = 0; i < mx; ++i)
    sp.x_vars.push_back(opt.bound_states ? qp.add_var(opt.states.lower[i], opt.states.upper[i]) : qp.add_var());
  for (int i = 0; i < mu; ++i) sp.u_vars.push_back(qp.add_var(opt.controls.lower[i], opt.controls.upper[i]));

  const std::size_t hidden = model.num_layers() - 1;
  const Layer& first = model.layer(0);
  for (std::size_t li = 0; li < hidden; ++li) {
    const Layer& l = model.layer(li);
    std::vector<int> zs;
    std::vector<Expr> ex;
    std::vector<int> as;
    for (Eigen::Index j = 0; j < l.rows(); ++j) {
      Expr e;
      e.constant = l.bias[j];
      if (li == 0) {
        for (int c = 0; c < mx; ++c) e.constant += first.weight(j, c) * x_k[c];
        for (int c = 0; c < mu; ++c)
          if (first.weight(j, mx + c) != 0.0) e.terms.emplace_back(sp.u_vars[c], first.weight(j, mx + c));
      } else {
        for (Eigen::Index c = 0; c < l.cols(); ++c)
          if (l.weight(j, c) != 0.0) e.terms.emplace_back(sp.z_vars[li - 1][c], l.weight(j, c));
      }
      ex.push_back(std::move(e));
      zs.push_back(qp.add_var());
      as.push_back(-1);
    }
    sp.z_vars.push_back(std::move(zs));
    sp.zhat.push_back(std::move(ex));
    sp.a_vars.push_back(std::move(as));
  }

  auto with = [](std::vector<Term> t, int var, double coef) {
    t.emplace_back(var, coef);
    return t;
  };
  auto scaled = [](const std::vector<Term>& t, double s) {
    std::vector<Term> r;
    r.reserve(t.size());
    for (const auto& [j, a] : t) r.emplace_back(j, a * s);
    return r;
  };

  for (std::size_t li = 0; li < hidden; ++li) {
    for (std::size_t j = 0; j < sp.z_vars[li].size(); ++j) {
      const double lo = bounds.lower[li][static_cast<Eigen::Index>(j)];
      const double hi = bounds.upper[li][static_cast<Eigen::Index>(j)];
      const Expr& e = sp.zhat[li][j];
      const int z = sp.z_vars[li][j];
      if (lo > hi) throw Error("step problem: inverted bounds at layer " + std::to_string(li + 1));
      if (hi == lo) {
        qp.add_eq({{z, 1.0}}, std::max(0.0, lo));
        ++sp.counts.stable;
        ++sp.counts.neuron_rows;
        continue;
      }
      if (lo >= 0.0) {  // z = zhat
        qp.add_eq(with(scaled(e.terms, -1.0), z, 1.0), e.constant);
        ++sp.counts.stable;
        ++sp.counts.neuron_rows;
        continue;
      }
      if (hi <= 0.0) {
        qp.add_eq({{z, 1.0}}, 0.0);
        ++sp.counts.stable;
        ++sp.counts.neuron_rows;
        continue;
      }
      ++sp.counts.unstable;
      qp.add_le({{z, -1.0}}, 0.0);                               // z >= 0
      qp.add_le(with(e.terms, z, -1.0), -e.constant);            // z >= zhat
      sp.counts.neuron_rows += 2;
      if (enc == Encoding::Bpo) {
        const BpoEnvelope& env = (*envelopes)[li][j];
        if (env.lhat != lo || env.uhat != hi) throw Error("step problem: envelopes were built from different bounds");
        const BpoEnvelope chord = env.degree == 1 ? env : build_envelope(lo, hi, 1);
        // z - c1 zhat <= c0
        const double c1 = chord.coeffs.size() > 1 ? chord.coeffs[1] : 0.0;
        const double c0 = chord.coeffs[0];
        qp.add_le(with(scaled(e.terms, -c1), z, 1.0), c0 + c1 * e.constant);
        ++sp.counts.neuron_rows;
        if (env.degree == 2) sp.quadratic.push_back({qp.num_le() - 1, z, e, env});
      } else {
        const int a = qp.add_var(0.0, 1.0);
        sp.a_vars[li][j] = a;
        // z <= zhat - lo (1 - a)  ->  z - zhat - lo a <= c - lo
        qp.add_le(with(with(scaled(e.terms, -1.0), z, 1.0), a, -lo), e.constant - lo);
        // z <= hi a
        qp.add_le({{z, 1.0}, {a, -hi}}, 0.0);
        sp.counts.neuron_rows += 2;
      }
    }
  }

  // x_next = x_k + dt (W_n z + b_n)
  const Layer& out = model.layer(hidden);
  const double dt = model.dt();
  for (int i = 0; i < mx; ++i) {
    std::vector<Term> row{{sp.x_vars[i], 1.0}};
    double rhs = x_k[i] + dt * out.bias[i];
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      const double w = out.weight(i, c);
      if (w == 0.0) continue;
      if (hidden == 0) {
        if (c < mx) rhs += dt * w * x_k[c];
        else row.emplace_back(sp.u_vars[c - mx], -dt * w);
      } else {
        row.emplace_back(sp.z_vars[hidden - 1][c], -dt * w);
      }
    }
    qp.add_eq(row, rhs);
    ++sp.counts.coupling;
  }

  if (opt.safety) {
    sp.safety_rhs = safety_rhs(index, taylor.bias);
    // grad^T dt f = grad^T (x_next - x_k)
    std::vector<Term> row;
    double rhs = sp.safety_rhs - taylor.bias + taylor.weight.dot(x_k) / dt;
    for (int i = 0; i < mx; ++i) row.emplace_back(sp.x_vars[i], taylor.weight[i] / dt);
    qp.add_le(row, rhs);
    sp.safety_row.push_back(row);
    ++sp.counts.safety;
  }

  if (opt.p == 2) {
    for (int i = 0; i < mx; ++i) {
      qp.add_quadratic(sp.x_vars[i], sp.x_vars[i], 2.0);
      qp.set_cost(sp.x_vars[i], -2.0 * x_ref[i]);
      sp.objective_constant += x_ref[i] * x_ref[i];
    }
  } else {
    for (int i = 0; i < mx; ++i) {
      const int t = qp.add_var(0.0, kInf, 1.0);
      sp.t_vars.push_back(t);
      qp.add_le({{sp.x_vars[i], 1.0}, {t, -1.0}}, x_ref[i]);
      qp.add_le({{sp.x_vars[i], -1.0}, {t, -1.0}}, -x_ref[i]);
      sp.counts.objective += 2;
    }
  }
  return sp;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline StepSolution finish(const StepProblem& sp, const QpResult& r) {
  StepSolution s;
  s.status = r.status;
  s.iterations = r.iterations;
  s.kkt_residual = r.kkt_residual;
  if (r.status == SolveStatus::Optimal) {
    s.values = r.x;
    s.u = sp.u_of(r.x);
    s.x_next = sp.x_next_of(r.x);
    s.objective = sp.objective(r.x);
  }
  return s;
}

}  // namespace detail

// BPO-relaxed step problem over the given per-step bounds and envelopes.
inline StepProblem assemble(const NeuralDynamics& model, const LayerBounds& bounds, const EnvelopeSet& envelopes,
                            const TaylorLayer& taylor, const SafetyIndex& index, const Vec& x_k, const Vec& x_ref,
                            const StepOptions& opt) {
  StepOptions o = opt;
  if (!envelopes.empty() && !envelopes.front().empty()) o.K = envelopes.front().front().degree;
  return detail::build(model, bounds, &envelopes, taylor, index, x_k, x_ref, o, detail::Encoding::Bpo);
}

// Solves the linear rows as they stand (quadratic envelopes enter through
// their current linearization, initially the chord).
inline StepSolution solve_lp_qp(const StepProblem& sp) {
  const auto t0 = std::chrono::steady_clock::now();
  StepSolution s = detail::finish(sp, solve_qp(sp.qp, sp.ipm));
  s.solve_time = detail::seconds_since(t0);
  return s;
}

namespace detail {

inline void linearize_at(StepProblem& sp, const QuadraticRow& q, double zhat0) {
  const double z0 = std::clamp(zhat0, q.envelope.lhat, q.envelope.uhat);
  const double m = eval_upper_derivative(q.envelope, z0);
  const double b = eval_poly(q.envelope.coeffs, z0) - m * z0;
  // z <= m zhat + b
  std::vector<Term> row{{q.z_var, 1.0}};
  for (const auto& [j, a] : q.zhat.terms) row.emplace_back(j, -m * a);
  sp.qp.set_le(q.le_row, row, b + m * q.zhat.constant);
}

inline void linearize_all(StepProblem& sp, const Vec& v) {
  for (const QuadraticRow& q : sp.quadratic) linearize_at(sp, q, q.zhat.at(v));
}

// Sequential tangent linearization from a starting point.
inline StepSolution ccp_from(StepProblem sp, const Vec& start, const StepOptions& opt) {
  StepSolution best;
  best.status = SolveStatus::Infeasible;
  Vec cur = start;
  int iters = 0;
  for (int it = 0; it < opt.ccp_iterations; ++it) {
    linearize_all(sp, cur);
    const QpResult r = solve_qp(sp.qp, sp.ipm);
    iters += r.iterations;
    if (r.status != SolveStatus::Optimal) {
      if (best.status != SolveStatus::LocallyOptimal) best.status = r.status;
      break;
    }
    best = finish(sp, r);
    best.status = SolveStatus::LocallyOptimal;
    const double step = detail::inf_norm(r.x - cur);
    cur = r.x;
    if (step <= opt.ccp_tolerance) break;
  }
  best.iterations = iters;
  return best;
}

}  // namespace detail

// K = 2: tangent linearization of the convex quadratic envelopes (an inner
// approximation, so every iterate satisfies the true envelopes), started
// from the chord solution and from the exact forward pass at its control.
inline StepSolution solve_qclp(const StepProblem& sp, const NeuralDynamics& model, const StepOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  StepSolution base = solve_lp_qp(sp);
  if (sp.quadratic.empty() || !base.ok()) {
    base.solve_time = detail::seconds_since(t0);
    return base;
  }
  const int base_iters = base.iterations;
  StepSolution best;
  best.status = SolveStatus::Infeasible;
  for (const Vec& start : {base.values, sp.exact_point(model, base.u)}) {
    StepSolution s = detail::ccp_from(sp, start, opt);
    best.iterations += s.iterations;
    if (s.ok() && (!best.ok() || s.objective < best.objective)) {
      const int it = best.iterations;
      best = s;
      best.iterations = it;
    }
  }
  best.iterations += base_iters;
  if (best.ok() && sp.max_violation(best.values) > 1e-6) {
    // restoration: one more linearization at the returned point
    StepProblem copy = sp;
    detail::linearize_all(copy, best.values);
    const QpResult r = solve_qp(copy.qp, copy.ipm);
    StepSolution s = detail::finish(copy, r);
    if (s.status == SolveStatus::Optimal && sp.max_violation(s.values) <= 1e-6) {
      s.status = SolveStatus::LocallyOptimal;
      best = s;
    } else {
      best.status = SolveStatus::Infeasible;
    }
  }
  if (!best.ok()) {
    BOND_LOG_INFO("solve_qclp: no linearization converged, returning chord solution");
    base.status = SolveStatus::BudgetExceeded;
    best = base;
  }
  best.solve_time = detail::seconds_since(t0);
  return best;
}

// Big-M step problem (exact ReLU encoding).
inline StepProblem assemble_mip(const NeuralDynamics& model, const LayerBounds& bounds, const TaylorLayer& taylor,
                                const SafetyIndex& index, const Vec& x_k, const Vec& x_ref, const StepOptions& opt) {
  return detail::build(model, bounds, nullptr, taylor, index, x_k, x_ref, opt, detail::Encoding::BigM);
}

// Best-first branch and bound over activation binaries; node relaxations by
// solve_qp. Incumbents come from the exact forward pass at each node's
// control, so the returned point is always exactly feasible.
inline StepSolution solve_mip(const StepProblem& sp, const NeuralDynamics& model, const StepOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  struct Node {
    double bound;
    long id;
    std::vector<std::pair<int, double>> fixed;
  };
  auto worse = [](const Node& a, const Node& b) { return a.bound > b.bound || (a.bound == b.bound && a.id > b.id); };
  std::priority_queue<Node, std::vector<Node>, decltype(worse)> open(worse);
  open.push({-kInf, 0, {}});
  long next_id = 1;
  StepSolution inc;
  inc.status = SolveStatus::Infeasible;
  int nodes = 0, iters = 0;
  double kkt = 0.0;
  bool budget = false;
  QpProblem work = sp.qp;
  IpmOptions node_ipm = sp.ipm;
  node_ipm.certify = false;

  auto exact_rows_ok = [&](const Vec& v) { return sp.qp.max_violation(v) <= 1e-7; };
  auto gap_tol = [](double inc_obj) { return 1e-9 * (1.0 + std::abs(inc_obj)); };

  while (!open.empty()) {
    Node node = open.top();
    open.pop();
    if (inc.ok() && node.bound >= inc.objective - gap_tol(inc.objective)) continue;
    if (nodes >= opt.max_nodes) {
      budget = true;
      break;
    }
    ++nodes;
    for (int j = 0; j < work.num_vars(); ++j) work.set_bounds(j, sp.qp.lower(j), sp.qp.upper(j));
    for (const auto& [a, val] : node.fixed) work.set_bounds(a, val, val);
    const QpResult r = solve_qp(work, node_ipm);
    iters += r.iterations;
    BOND_LOG_DEBUG("mip node " << nodes << " depth " << node.fixed.size() << " " << to_string(r.status) << " bound "
                               << (r.x.size() ? sp.objective(r.x) : kInf) << " inc " << inc.objective);
    if (r.status != SolveStatus::Optimal) continue;
    kkt = std::max(kkt, r.kkt_residual);
    const double bound = sp.objective(r.x);
    const Vec u = sp.u_of(r.x).cwiseMax(opt.controls.lower).cwiseMin(opt.controls.upper);
    const Vec ex = sp.exact_point(model, u);
    if (exact_rows_ok(ex)) {
      const double obj = sp.objective(ex);
      if (!inc.ok() || obj < inc.objective) {
        inc.status = SolveStatus::Optimal;
        inc.values = ex;
        inc.objective = obj;
        inc.u = u;
        inc.x_next = sp.x_next_of(ex);
      }
    }
    if (inc.ok() && bound >= inc.objective - gap_tol(inc.objective)) continue;
    // branch on the most fractional binary among neurons the relaxation
    // does not evaluate exactly
    int pick = -1;
    double frac = -1.0;
    for (std::size_t li = 0; li < sp.z_vars.size(); ++li)
      for (std::size_t j = 0; j < sp.z_vars[li].size(); ++j) {
        const int a = sp.a_vars[li][j];
        if (a < 0 || work.lower(a) == work.upper(a)) continue;
        const double zh = sp.zhat[li][j].at(r.x);
        if (std::abs(r.x[sp.z_vars[li][j]] - std::max(0.0, zh)) <= 1e-9) continue;
        const double f = 0.5 - std::abs(r.x[a] - 0.5);
        if (f > frac) {
          frac = f;
          pick = a;
        }
      }
    if (pick < 0) continue;
    for (double val : {0.0, 1.0}) {
      Node child{bound, next_id++, node.fixed};
      child.fixed.emplace_back(pick, val);
      open.push(std::move(child));
    }
  }
  if (budget && inc.ok()) {
    inc.status = SolveStatus::BudgetExceeded;
  } else if (budget) {
    inc.status = SolveStatus::BudgetExceeded;
  }
  inc.nodes = nodes;
  inc.iterations = iters;
  inc.kkt_residual = kkt;
  inc.solve_time = detail::seconds_since(t0);
  return inc;
}

// Pattern-free convenience: bounds, envelopes and the Taylor layer at x_k,
// then the solver for `method`.
struct StepContext {
  const NeuralDynamics* model = nullptr;
  const SafetyIndex* index = nullptr;
  BoundsMethod bounds_method = BoundsMethod::DUAL;
  double t = 0.0;
};

inline StepSolution solve_step(const StepContext& ctx, Method method, const Vec& x_k, const Vec& x_ref,
                               StepOptions opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const NeuralDynamics& model = *ctx.model;
  const LayerBounds b = compute_bounds(model, per_step_box(x_k, opt.controls), ctx.bounds_method);
  const TaylorLayer tl = taylor_layer(*ctx.index, x_k, ctx.t);
  StepSolution s;
  if (method == Method::MIP) {
    opt.K = 1;
    s = solve_mip(assemble_mip(model, b, tl, *ctx.index, x_k, x_ref, opt), model, opt);
  } else {
    opt.K = method == Method::BPO1 ? 1 : 2;
    const StepProblem sp = assemble(model, b, build_envelopes(b, opt.K), tl, *ctx.index, x_k, x_ref, opt);
    s = opt.K == 1 ? solve_lp_qp(sp) : solve_qclp(sp, model, opt);
  }
  s.solve_time = detail::seconds_since(t0);
  return s;
}

struct OrderingReport {
  StepSolution mip, bpo2, bpo1;
  bool all_infeasible = false;
  bool ordered = false;
};

// Runs the three formulations on one instance and checks
// obj(BPO-1) <= obj(BPO-2) + tol <= obj(MIP) + tol.
inline OrderingReport relaxation_ordering_audit(const StepContext& ctx, const Vec& x_k, const Vec& x_ref,
                                                StepOptions opt, double tol = 1e-5) {
  OrderingReport r;
  r.mip = solve_step(ctx, Method::MIP, x_k, x_ref, opt);
  r.bpo2 = solve_step(ctx, Method::BPO2, x_k, x_ref, opt);
  r.bpo1 = solve_step(ctx, Method::BPO1, x_k, x_ref, opt);
  r.all_infeasible = r.mip.status == SolveStatus::Infeasible && r.bpo1.status == SolveStatus::Infeasible &&
                     r.bpo2.status == SolveStatus::Infeasible;
  if (r.all_infeasible) {
    r.ordered = true;
  } else if (r.mip.ok() && r.bpo1.ok() && r.bpo2.ok()) {
    r.ordered = r.bpo1.objective <= r.bpo2.objective + tol && r.bpo2.objective <= r.mip.objective + tol;
  }
  if (!r.ordered) {
    BOND_LOG_INFO("ordering audit violated: bpo1 " << r.bpo1.objective << " bpo2 " << r.bpo2.objective << " mip "
                                                   << r.mip.objective);
  }
  return r;
}

// Diagnostic dump in CPLEX LP text format (quadratic envelopes appear
// through their current linearization).
inline void write_lp(std::ostream& os, const StepProblem& sp) {
  const QpProblem& q = sp.qp;
  auto name = [](int j) { return "v" + std::to_string(j); };
  auto row = [&](const std::vector<Term>& t) {
    std::ostringstream s;
    bool first = true;
    for (const auto& [j, a] : t) {
      if (a == 0.0) continue;
      s << (a < 0 ? " - " : (first ? " " : " + ")) << detail::fmt17(std::abs(a)) << ' ' << name(j);
      first = false;
    }
    if (first) s << " 0 " << name(0);
    return s.str();
  };
  os << "\\ step problem, p=" << sp.p << " K=" << sp.K << "\nMinimize\n obj:";
  std::vector<Term> lin;
  for (int j = 0; j < q.num_vars(); ++j)
    if (q.costs()[j] != 0.0) lin.emplace_back(j, q.costs()[j]);
  os << row(lin);
  if (!q.quadratic().empty()) {
    os << " + [";
    for (const auto& t : q.quadratic()) os << ' ' << detail::fmt17(t.value()) << ' ' << name(t.row()) << " * " << name(t.col());
    os << " ] / 2";
  }
  os << "\nSubject To\n";
  for (int i = 0; i < q.num_eq(); ++i) os << " e" << i << ':' << row(q.eq_rows()[i]) << " = " << detail::fmt17(q.eq_rhs()[i]) << '\n';
  for (int i = 0; i < q.num_le(); ++i) os << " c" << i << ':' << row(q.le_rows()[i]) << " <= " << detail::fmt17(q.le_rhs()[i]) << '\n';
  os << "Bounds\n";
  std::vector<int> bins;
  for (int j = 0; j < q.num_vars(); ++j) {
    const double lo = q.lower(j), hi = q.upper(j);
    os << ' ' << (std::isfinite(lo) ? detail::fmt17(lo) : std::string("-inf")) << " <= " << name(j)
       << " <= " << (std::isfinite(hi) ? detail::fmt17(hi) : std::string("+inf")) << '\n';
  }
  for (const auto& layer : sp.a_vars)
    for (int a : layer)
      if (a >= 0) bins.push_back(a);
  if (!bins.empty()) {
    os << "Binaries\n";
    for (int a : bins) os << ' ' << name(a) << '\n';
  }
  os << "End\n";
}

}  // namespace bond
