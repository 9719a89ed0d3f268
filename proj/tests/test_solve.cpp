#include "bond/step.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace bond;

namespace {

// Best objective over every activation pattern of a one-hidden-layer net,
// each pattern solved as its own LP/QP with the pattern's sign constraints.
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

Instance random_instance(int s, std::mt19937_64& rng, std::vector<int> sizes = {6, 6, 4}) {
  Instance in{random_network(sizes, 4, 0.1, s), {}, sample_box(unicycle_state_box(), rng), {}, {}};
  const Vec g = sample_box(unicycle_state_box(), rng);
  in.r = in.x + (g - in.x) / 10;
  SafetySpec sp;
  sp.other.start = in.x.head<2>() + Eigen::Vector2d(0.6, 0.3);
  in.index = SafetyIndex(1, 0, 0, sp, 0.1);
  in.opt.p = 1 + s % 2;
  return in;
}

// Hidden layer saturated on, output constant: every neuron is stable.
NeuralDynamics constant_drift(double vx) {
  Layer a, b;
  a.weight = Mat::Zero(3, 6);
  a.bias = Vec::Ones(3);
  b.weight = Mat::Zero(4, 3);
  b.weight(0, 0) = vx;
  b.bias = Vec::Zero(4);
  return NeuralDynamics({a, b}, 4, 2, 0.1);
}

NeuralDynamics stable_linear(std::uint64_t seed) {
  auto m = random_network({6, 8, 4}, 4, 0.1, seed);
  std::vector<Layer> ls{m.layer(0), m.layer(1)};
  ls[0].weight *= 0.01;
  ls[0].bias = Vec::Constant(8, 1.0);
  return NeuralDynamics(ls, 4, 2, 0.1);
}

}  // namespace

TEST(Mip, MatchesPatternEnumeration) {
  std::mt19937_64 rng(5);
  int feasible = 0;
  for (int s = 0; s < 50; ++s) {
    const Instance in = random_instance(s, rng);
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    const StepSolution mip = solve_step(ctx, Method::MIP, in.x, in.r, in.opt);
    const double e = enumerate_patterns(in.model, in.index, taylor_layer(in.index, in.x, 0), in.x, in.r, in.opt.p);
    if (std::isinf(e)) {
      EXPECT_EQ(mip.status, SolveStatus::Infeasible) << "seed " << s;
      continue;
    }
    ASSERT_TRUE(mip.ok()) << "seed " << s;
    EXPECT_NEAR(mip.objective, e, 1e-7) << "seed " << s;
    EXPECT_LE((mip.x_next - in.model.euler_step(in.x, mip.u)).cwiseAbs().maxCoeff(), 1e-6);
    ++feasible;
  }
  EXPECT_GT(feasible, 25);
}

TEST(Mip, OrderingAuditHolds) {
  std::mt19937_64 rng(5);
  int ordered = 0;
  for (int s = 0; s < 100; ++s) {
    const Instance in = random_instance(s, rng);
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    if (relaxation_ordering_audit(ctx, in.x, in.r, in.opt).ordered) ++ordered;
  }
  EXPECT_GE(ordered, 95);
}

TEST(Relaxation, DegreeTwoNeverBelowChord) {
  std::mt19937_64 rng(8);
  for (int s = 0; s < 100; ++s) {
    const Instance in = random_instance(200 + s, rng, {6, 12, 4});
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    const StepSolution a = solve_step(ctx, Method::BPO1, in.x, in.r, in.opt);
    const StepSolution b = solve_step(ctx, Method::BPO2, in.x, in.r, in.opt);
    if (a.ok() && b.ok()) EXPECT_GE(b.objective, a.objective - 1e-6) << "seed " << s;
  }
}

TEST(Relaxation, ExactPairFeasibleForBothDegrees) {
  std::mt19937_64 rng(2);
  for (int s = 0; s < 20; ++s) {
    const Instance in = random_instance(s, rng);
    const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
    const StepSolution mip = solve_step(ctx, Method::MIP, in.x, in.r, in.opt);
    if (!mip.ok()) continue;
    const LayerBounds b = compute_bounds(in.model, per_step_box(in.x, in.opt.controls), BoundsMethod::DUAL);
    const TaylorLayer tl = taylor_layer(in.index, in.x, 0);
    for (int K : {1, 2}) {
      const StepProblem sp = assemble(in.model, b, build_envelopes(b, K), tl, in.index, in.x, in.r, in.opt);
      EXPECT_LE(sp.max_violation(sp.exact_point(in.model, mip.u)), 1e-8) << "seed " << s << " K " << K;
    }
  }
}

TEST(Relaxation, AllStableMethodsAgree) {
  const NeuralDynamics m = stable_linear(3);
  SafetySpec sp;
  sp.other.start = Eigen::Vector2d(5, 5);
  const SafetyIndex idx(1, 0, 0, sp, 0.1);
  const Vec x = (Vec(4) << 0, 0, 1, 0.2).finished(), r = (Vec(4) << 0.3, 0.1, 1.2, 0.1).finished();
  const LayerBounds b = compute_bounds(m, per_step_box(x, unicycle_control_box()), BoundsMethod::DUAL);
  EXPECT_TRUE((b.lower[0].array() > 0).all());
  const StepContext ctx{&m, &idx, BoundsMethod::DUAL, 0};
  for (int p : {1, 2}) {
    StepOptions o;
    o.p = p;
    o.safety = false;
    const OrderingReport rep = relaxation_ordering_audit(ctx, x, r, o);
    ASSERT_TRUE(rep.mip.ok());
    EXPECT_EQ(rep.mip.nodes, 1);
    EXPECT_NEAR(rep.bpo1.objective, rep.mip.objective, 1e-6);
    EXPECT_NEAR(rep.bpo2.objective, rep.mip.objective, 1e-6);
    EXPECT_TRUE(rep.ordered);
  }
}

TEST(Relaxation, InfeasibleSafetyRowSharedByAll) {
  const NeuralDynamics m = constant_drift(2.0);
  SafetySpec sp;
  sp.other.start = Eigen::Vector2d(0.3, 0.0);
  const SafetyIndex idx(1, 0, 0, sp, 0.1);
  const StepContext ctx{&m, &idx, BoundsMethod::DUAL, 0};
  const Vec x = Vec::Zero(4), r = (Vec(4) << -1, 0, 0, 0).finished();
  const OrderingReport rep = relaxation_ordering_audit(ctx, x, r, StepOptions{});
  EXPECT_EQ(rep.mip.status, SolveStatus::Infeasible);
  EXPECT_EQ(rep.bpo1.status, SolveStatus::Infeasible);
  EXPECT_FALSE(rep.bpo2.ok());
  EXPECT_TRUE(rep.all_infeasible);
  StepOptions off;
  off.safety = false;
  EXPECT_TRUE(solve_step(ctx, Method::BPO1, x, r, off).ok());
}

TEST(Ccp, SingleNeuronToyReachesEnvelopeMaximum) {
  StepProblem sp;
  sp.K = 2;
  const int zh = sp.qp.add_var(-1, 1), z = sp.qp.add_var(-kInf, kInf, -1.0);
  sp.qp.add_le({{z, 1}, {zh, -0.5}}, 0.5);
  const BpoEnvelope env = build_envelope(-1, 1, 2);
  sp.quadratic.push_back({0, z, Expr{{{zh, 1.0}}, 0.0}, env});
  EXPECT_NEAR(eval_upper(env, 0.3), (0.3 + 1) * (0.3 + 1) / 4, 1e-15);
  StepOptions o;
  const StepSolution s = detail::ccp_from(sp, Vec::Zero(2), o);
  EXPECT_EQ(s.status, SolveStatus::LocallyOptimal);
  EXPECT_NEAR(s.values[zh], 1.0, 1e-6);
  EXPECT_NEAR(s.values[z], 1.0, 1e-6);
  EXPECT_LE(sp.max_violation(s.values), 1e-8);
}

TEST(Ccp, ChordLinearizationReducesToDegreeOne) {
  std::mt19937_64 rng(3);
  const Instance in = random_instance(7, rng, {6, 10, 4});
  const LayerBounds b = compute_bounds(in.model, per_step_box(in.x, in.opt.controls), BoundsMethod::DUAL);
  const TaylorLayer tl = taylor_layer(in.index, in.x, 0);
  const StepProblem k2 = assemble(in.model, b, build_envelopes(b, 2), tl, in.index, in.x, in.r, in.opt);
  const StepProblem k1 = assemble(in.model, b, build_envelopes(b, 1), tl, in.index, in.x, in.r, in.opt);
  ASSERT_FALSE(k2.quadratic.empty());
  const StepSolution a = solve_lp_qp(k2), c = solve_lp_qp(k1);
  ASSERT_EQ(a.ok(), c.ok());
  if (a.ok()) EXPECT_NEAR(a.objective, c.objective, 1e-7);
}

TEST(Assemble, ConstraintCountsFollowNeuronKinds) {
  std::mt19937_64 rng(11);
  for (int s = 0; s < 5; ++s) {
    const auto m = random_network({6, 8, 4}, 4, 0.1, 60 + s);
    const Vec x = sample_box(unicycle_state_box(), rng);
    const LayerBounds b = compute_bounds(m, per_step_box(x, unicycle_control_box()), BoundsMethod::DUAL);
    int unstable = 0, stable = 0;
    for (int j = 0; j < 8; ++j) (b.lower[0][j] < 0 && b.upper[0][j] > 0 ? unstable : stable)++;
    SafetySpec spec;
    const SafetyIndex idx(1, 0, 0, spec, 0.1);
    for (int p : {1, 2}) {
      StepOptions o;
      o.p = p;
      const StepProblem sp =
          assemble(m, b, build_envelopes(b, 1), taylor_layer(idx, x, 0), idx, x, x, o);
      EXPECT_EQ(sp.counts.unstable, unstable);
      EXPECT_EQ(sp.counts.stable, stable);
      EXPECT_EQ(sp.counts.neuron_rows, 3 * unstable + stable);
      EXPECT_EQ(sp.counts.coupling, 4);
      EXPECT_EQ(sp.counts.safety, 1);
      EXPECT_EQ(sp.counts.objective, p == 1 ? 8 : 0);
      EXPECT_EQ(sp.qp.num_le() + sp.qp.num_eq(), 3 * unstable + stable + 4 + 1 + (p == 1 ? 8 : 0));
    }
  }
}

TEST(Assemble, SafetyRhsFormula) {
  SafetySpec spec;
  spec.other.start = Eigen::Vector2d(1, 0);
  SafetyIndex idx(2, 0.5, 0.1, spec, 0.1);
  idx.M_f = 3.0;
  idx.M_phi = 2.0;
  const double z = 0.5 * 9 * 2 * 0.01;
  EXPECT_DOUBLE_EQ(safety_rhs(idx, 0.5), 0.5 - 0.05 - z);
  EXPECT_DOUBLE_EQ(safety_rhs(idx, -3.0), -z);
}

TEST(Assemble, StaleBoundsRejected) {
  const auto m = random_network({6, 8, 4}, 4, 0.1, 1);
  const Vec x = (Vec(4) << 0, 0, 1, 0).finished(), moved = (Vec(4) << 0.5, 0, 1, 0).finished();
  const LayerBounds b = compute_bounds(m, per_step_box(x, unicycle_control_box()), BoundsMethod::DUAL);
  SafetySpec spec;
  const SafetyIndex idx(1, 0, 0, spec, 0.1);
  const TaylorLayer tl = taylor_layer(idx, moved, 0);
  EXPECT_THROW(assemble(m, b, build_envelopes(b, 1), tl, idx, moved, moved, StepOptions{}), Error);
  EXPECT_THROW(assemble_mip(m, b, tl, idx, moved, moved, StepOptions{}), Error);
  StepOptions bad;
  bad.p = 3;
  EXPECT_THROW(assemble(m, b, build_envelopes(b, 1), tl, idx, x, x, bad), Error);
}

TEST(Solve, Deterministic) {
  std::mt19937_64 rng(4);
  const Instance in = random_instance(3, rng, {6, 12, 12, 4});
  const StepContext ctx{&in.model, &in.index, BoundsMethod::DUAL, 0};
  for (Method meth : {Method::MIP, Method::BPO1, Method::BPO2}) {
    const StepSolution a = solve_step(ctx, meth, in.x, in.r, in.opt), b = solve_step(ctx, meth, in.x, in.r, in.opt);
    EXPECT_EQ(a.status, b.status);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(a.nodes, b.nodes);
  }
}

TEST(Solve, WriteLpListsEveryPart) {
  std::mt19937_64 rng(4);
  const Instance in = random_instance(1, rng);
  const LayerBounds b = compute_bounds(in.model, per_step_box(in.x, in.opt.controls), BoundsMethod::DUAL);
  const TaylorLayer tl = taylor_layer(in.index, in.x, 0);
  std::ostringstream os;
  const StepProblem mip = assemble_mip(in.model, b, tl, in.index, in.x, in.r, in.opt);
  write_lp(os, mip);
  const std::string s = os.str();
  for (const char* part : {"Minimize", "Subject To", "Bounds", "End"}) EXPECT_NE(s.find(part), std::string::npos);
  EXPECT_EQ(s.find("Binaries") != std::string::npos, mip.counts.unstable > 0);
}

TEST(Method, Names) {
  EXPECT_EQ(parse_method("mip"), Method::MIP);
  EXPECT_EQ(parse_method("bpo1"), Method::BPO1);
  EXPECT_STREQ(to_string(Method::BPO2), "bpo2");
  EXPECT_EQ(parse_constraint("plain"), ConstraintMode::Plain);
  EXPECT_THROW(parse_method("lp"), Error);
}
