#pragma once

#include "bond/common.hpp"

#include <Eigen/LU>
#include <Eigen/Sparse>

#include <chrono>
#include <utility>
#include <vector>

namespace bond {

using SparseRowMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using SparseMat = Eigen::SparseMatrix<double>;
using Term = std::pair<int, double>;

// Convex QP in the form
//   min 1/2 x^T Q x + c^T x   s.t.  A x = b,  G x <= h,  lb <= x <= ub
// assembled row by row. Q must be positive semidefinite.
class QpProblem {
 public:
  int add_var(double lb = -kInf, double ub = kInf, double cost = 0.0) {
    lb_.push_back(lb);
    ub_.push_back(ub);
    c_.push_back(cost);
    return static_cast<int>(lb_.size()) - 1;
  }

  int num_vars() const { return static_cast<int>(lb_.size()); }
  int num_eq() const { return static_cast<int>(eq_rhs_.size()); }
  int num_le() const { return static_cast<int>(le_rhs_.size()); }

  void add_eq(const std::vector<Term>& terms, double rhs) { push(eq_, eq_rhs_, terms, rhs); }
  void add_le(const std::vector<Term>& terms, double rhs) { push(le_, le_rhs_, terms, rhs); }

  void set_cost(int var, double cost) { c_.at(var) = cost; }
  void add_quadratic(int i, int j, double value) { quad_.emplace_back(i, j, value); }
  void set_bounds(int var, double lb, double ub) {
    lb_.at(var) = lb;
    ub_.at(var) = ub;
  }

  double lower(int var) const { return lb_.at(var); }
  double upper(int var) const { return ub_.at(var); }
  const std::vector<double>& costs() const { return c_; }
  const std::vector<std::vector<Term>>& eq_rows() const { return eq_; }
  const std::vector<std::vector<Term>>& le_rows() const { return le_; }
  const std::vector<double>& eq_rhs() const { return eq_rhs_; }
  const std::vector<double>& le_rhs() const { return le_rhs_; }
  const std::vector<Eigen::Triplet<double>>& quadratic() const { return quad_; }

  // Replace a previously added inequality row (used by sequential
  // linearization, which updates envelope rows in place).
  void set_le(int row, const std::vector<Term>& terms, double rhs) {
    le_.at(row) = terms;
    le_rhs_.at(row) = rhs;
  }

  double objective(const Vec& x) const {
    double v = 0.0;
    for (int i = 0; i < num_vars(); ++i) v += c_[i] * x[i];
    for (const auto& t : quad_) v += 0.5 * t.value() * x[t.row()] * x[t.col()];
    return v;
  }

  // Largest violation of any constraint or bound at x.
  double max_violation(const Vec& x) const {
    double v = 0.0;
    for (int i = 0; i < num_eq(); ++i) v = std::max(v, std::abs(row_dot(eq_[i], x) - eq_rhs_[i]));
    for (int i = 0; i < num_le(); ++i) v = std::max(v, row_dot(le_[i], x) - le_rhs_[i]);
    for (int i = 0; i < num_vars(); ++i) v = std::max({v, lb_[i] - x[i], x[i] - ub_[i]});
    return v;
  }

  static double row_dot(const std::vector<Term>& row, const Vec& x) {
    double s = 0.0;
    for (const auto& [j, a] : row) s += a * x[j];
    return s;
  }

 private:
  static void push(std::vector<std::vector<Term>>& rows, std::vector<double>& rhs, const std::vector<Term>& terms,
                   double r) {
    rows.push_back(terms);
    rhs.push_back(r);
  }

  std::vector<double> lb_, ub_, c_;
  std::vector<std::vector<Term>> eq_, le_;
  std::vector<double> eq_rhs_, le_rhs_;
  std::vector<Eigen::Triplet<double>> quad_;
};

enum class SolveStatus { Optimal, LocallyOptimal, Infeasible, BudgetExceeded };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::LocallyOptimal: return "locally_optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::BudgetExceeded: return "budget_exceeded";
  }
  return "unknown";
}

inline SolveStatus parse_status(const std::string& s) {
  for (SolveStatus v : {SolveStatus::Optimal, SolveStatus::LocallyOptimal, SolveStatus::Infeasible,
                        SolveStatus::BudgetExceeded})
    if (s == to_string(v)) return v;
  throw FormatError("unknown solve status '" + s + "'");
}

struct QpResult {
  SolveStatus status = SolveStatus::BudgetExceeded;
  Vec x;
  double objective = kInf;
  double kkt_residual = kInf;
  int iterations = 0;
};

struct IpmOptions {
  int max_iterations = 80;
  double tolerance = 1e-10;            // target
  double acceptable_tolerance = 1e-8;  // accepted when progress stalls
  double infeasibility_tolerance = 1e-7;
  bool certify = true;  // phase one on failure, else report budget_exceeded
};

namespace detail {

// Sparse normal form used by the interior-point iteration.
struct StandardForm {
  int n = 0;
  SparseMat Q;
  Vec c;
  SparseRowMat A, G;
  Vec b, h;
};

inline StandardForm standard_form(const QpProblem& p) {
  StandardForm f;
  f.n = p.num_vars();
  f.Q.resize(f.n, f.n);
  f.Q.setFromTriplets(p.quadratic().begin(), p.quadratic().end());
  f.c = Eigen::Map<const Vec>(p.costs().data(), f.n);
  std::vector<Eigen::Triplet<double>> at, gt;
  std::vector<double> b, h;
  auto add_rows = [](std::vector<Eigen::Triplet<double>>& trip, std::vector<double>& rhs,
                     const std::vector<std::vector<Term>>& rows, const std::vector<double>& r) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int row = static_cast<int>(rhs.size());
      for (const auto& [j, a] : rows[i])
        if (a != 0.0) trip.emplace_back(row, j, a);
      rhs.push_back(r[i]);
    }
  };
  add_rows(at, b, p.eq_rows(), p.eq_rhs());
  add_rows(gt, h, p.le_rows(), p.le_rhs());
  for (int j = 0; j < f.n; ++j) {
    const double lo = p.lower(j), hi = p.upper(j);
    if (lo == hi) {
      at.emplace_back(static_cast<int>(b.size()), j, 1.0);
      b.push_back(lo);
      continue;
    }
    if (std::isfinite(hi)) {
      gt.emplace_back(static_cast<int>(h.size()), j, 1.0);
      h.push_back(hi);
    }
    if (std::isfinite(lo)) {
      gt.emplace_back(static_cast<int>(h.size()), j, -1.0);
      h.push_back(-lo);
    }
  }
  f.A.resize(static_cast<int>(b.size()), f.n);
  f.A.setFromTriplets(at.begin(), at.end());
  f.G.resize(static_cast<int>(h.size()), f.n);
  f.G.setFromTriplets(gt.begin(), gt.end());
  f.b = Eigen::Map<Vec>(b.data(), static_cast<Eigen::Index>(b.size()));
  f.h = Eigen::Map<Vec>(h.data(), static_cast<Eigen::Index>(h.size()));
  return f;
}

inline double max_step(const Vec& v, const Vec& dv) {
  double a = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
  return a;
}

inline double inf_norm(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

struct IpmState {
  Vec x, y, lam, s;
  double kkt = kInf;
  int iterations = 0;
  bool converged = false;
};

// Mehrotra predictor-corrector on the standard form.
inline IpmState run_ipm(const StandardForm& f, const IpmOptions& opt) {
  const int n = f.n, me = static_cast<int>(f.A.rows()), mi = static_cast<int>(f.G.rows());
  IpmState st;
  st.x = Vec::Zero(n);
  st.y = Vec::Zero(me);
  st.s = (f.h - f.G * st.x).cwiseMax(1.0);
  st.lam = Vec::Ones(mi);
  const SparseRowMat At = f.A.transpose();
  const Eigen::SparseMatrix<double> Gt = f.G.transpose();
  IpmState best;
  Mat K(n + me, n + me);
  int stall = 0;
  for (int it = 0; it <= opt.max_iterations; ++it) {
    const Vec rd = f.Q * st.x + f.c + At * st.y + Gt * st.lam;
    const Vec rp = f.A * st.x - f.b;
    const Vec rg = f.G * st.x + st.s - f.h;
    const double comp = mi ? (st.s.cwiseProduct(st.lam)).maxCoeff() : 0.0;
    st.kkt = std::max({inf_norm(rd), inf_norm(rp), inf_norm(rg), comp});
    st.iterations = it;
    BOND_LOG_DEBUG("ipm " << it << " rd " << inf_norm(rd) << " rp " << inf_norm(rp) << " rg " << inf_norm(rg)
                          << " comp " << comp);
    if (st.kkt <= opt.tolerance) {
      st.converged = true;
      return st;
    }
    if (st.kkt < best.kkt) {
      best = st;
      stall = 0;
    } else if (best.kkt < 1e-6 && ++stall >= 5) {
      break;
    }
    if (it == opt.max_iterations) break;
    const double mu = mi ? st.s.dot(st.lam) / mi : 0.0;
    const Vec d = st.lam.cwiseQuotient(st.s);
    K.setZero();
    K.topLeftCorner(n, n) = Mat(f.Q);
    K.topLeftCorner(n, n) += Mat(Gt * d.asDiagonal() * f.G);
    for (int k = 0; k < f.A.outerSize(); ++k)
      for (SparseRowMat::InnerIterator e(f.A, k); e; ++e) {
        K(n + e.row(), e.col()) = e.value();
        K(e.col(), n + e.row()) = e.value();
      }
    Eigen::PartialPivLU<Mat> lu;
    double reg = 1e-13;
    auto factor = [&] {
      Mat Kreg = K;
      Kreg.diagonal().head(n).array() += reg;
      Kreg.diagonal().tail(me).array() -= reg;
      lu.compute(Kreg);
    };
    factor();

    auto solve = [&](const Vec& rc, Vec& dx, Vec& dy, Vec& dl, Vec& ds) {
      Vec rhs(n + me);
      rhs.head(n) = -rd - Gt * ((-rc + st.lam.cwiseProduct(rg)).cwiseQuotient(st.s));
      rhs.tail(me) = -rp;
      Vec sol = lu.solve(rhs);
      // near-singular systems: bump the regularization and refactor
      while (!sol.allFinite() && reg < 1e-4) {
        reg *= 1e3;
        factor();
        sol = lu.solve(rhs);
      }
      for (int refine = 0; refine < 2; ++refine) {
        const Vec next = sol + lu.solve(rhs - K * sol);
        if (!next.allFinite()) break;
        sol = next;
      }
      dx = sol.head(n);
      dy = sol.tail(me);
      ds = -rg - f.G * dx;
      dl = (-rc - st.lam.cwiseProduct(ds)).cwiseQuotient(st.s);
    };

    Vec dx, dy, dl, ds;
    solve(st.s.cwiseProduct(st.lam), dx, dy, dl, ds);
    const double a_aff = std::min(max_step(st.s, ds), max_step(st.lam, dl));
    const double mu_aff = mi ? (st.s + a_aff * ds).dot(st.lam + a_aff * dl) / mi : 0.0;
    const double sigma = mu > 0.0 ? std::pow(mu_aff / mu, 3.0) : 0.0;
    const Vec rc = st.s.cwiseProduct(st.lam) + ds.cwiseProduct(dl) - Vec::Constant(mi, sigma * mu);
    solve(rc, dx, dy, dl, ds);
    const double a = std::min(1.0, 0.995 * std::min(max_step(st.s, ds), max_step(st.lam, dl)));
    st.x += a * dx;
    st.y += a * dy;
    st.lam += a * dl;
    st.s += a * ds;
    if (!st.x.allFinite() || a < 1e-14) {
      BOND_LOG_DEBUG("ipm stopped: step " << a);
      break;
    }
  }
  if (best.kkt <= opt.acceptable_tolerance) best.converged = true;
  return best;
}

}  // namespace detail

// Minimal constraint violation t* of {A x = b, G x <= h + t}; positive means
// the problem is infeasible.
inline double phase_one_violation(const detail::StandardForm& f, const IpmOptions& opt) {
  detail::StandardForm p;
  p.n = f.n + 1;
  p.Q.resize(p.n, p.n);
  p.c = Vec::Zero(p.n);
  p.c[f.n] = 1.0;
  p.A.resize(f.A.rows(), p.n);
  {
    std::vector<Eigen::Triplet<double>> t;
    for (int r = 0; r < f.A.outerSize(); ++r)
      for (SparseRowMat::InnerIterator itr(f.A, r); itr; ++itr) t.emplace_back(r, static_cast<int>(itr.col()), itr.value());
    p.A.setFromTriplets(t.begin(), t.end());
  }
  {
    std::vector<Eigen::Triplet<double>> t;
    for (int r = 0; r < f.G.outerSize(); ++r) {
      for (SparseRowMat::InnerIterator itr(f.G, r); itr; ++itr) t.emplace_back(r, static_cast<int>(itr.col()), itr.value());
      t.emplace_back(r, f.n, -1.0);
    }
    const int extra = static_cast<int>(f.G.rows());
    t.emplace_back(extra, f.n, -1.0);  // t >= -1 keeps the phase-one problem bounded
    p.G.resize(extra + 1, p.n);
    p.G.setFromTriplets(t.begin(), t.end());
  }
  p.b = f.b;
  p.h.resize(f.h.size() + 1);
  p.h << f.h, 1.0;
  IpmOptions o = opt;
  o.max_iterations = 2 * opt.max_iterations;
  const detail::IpmState st = detail::run_ipm(p, o);
  const double rp = detail::inf_norm(f.A * st.x.head(f.n) - f.b);
  if (rp > 1e-6) return std::max(rp, st.x[f.n]);
  return st.x[f.n];
}

// Interior-point solve of a convex QP/LP. Infeasibility is certified by a
// phase-one problem whenever the main iteration fails to converge.
inline QpResult solve_qp(const QpProblem& problem, const IpmOptions& opt = {}) {
  const detail::StandardForm f = detail::standard_form(problem);
  const detail::IpmState st = detail::run_ipm(f, opt);
  QpResult r;
  r.iterations = st.iterations;
  r.kkt_residual = st.kkt;
  if (st.converged) {
    r.status = SolveStatus::Optimal;
    r.x = st.x;
    r.objective = problem.objective(st.x);
    return r;
  }
  r.x = st.x;
  if (!opt.certify) {
    r.status = SolveStatus::BudgetExceeded;
    return r;
  }
  const double viol = phase_one_violation(f, opt);
  r.status = viol > opt.infeasibility_tolerance ? SolveStatus::Infeasible : SolveStatus::BudgetExceeded;
  return r;
}

}  // namespace bond
