#pragma once

#include "bond/bounds.hpp"
#include "bond/jet.hpp"

#include <Eigen/Eigenvalues>

namespace bond {

enum class TaskKind { CollisionAvoidance, SafeFollowing };

inline const char* to_string(TaskKind t) {
  return t == TaskKind::CollisionAvoidance ? "collision" : "following";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "collision" || s == "collision_avoidance") return TaskKind::CollisionAvoidance;
  if (s == "following" || s == "safe_following") return TaskKind::SafeFollowing;
  throw Error("unknown task '" + s + "' (expected collision or following)");
}

// Constant-velocity planar point: the obstacle (velocity zero) or the
// moving target.
struct PointTrajectory {
  Eigen::Vector2d start = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();

  Eigen::Vector2d position(double t) const { return start + velocity * t; }
};

struct SafetySpec {
  TaskKind task = TaskKind::CollisionAvoidance;
  PointTrajectory other;
  double d_min = 0.5;       // collision avoidance
  double ring_inner = 1.0;  // safe following annulus
  double ring_outer = 2.0;
  double gamma = 0.5;

  void validate() const {
    if (!(d_min > 0.0)) throw Error("safety spec: d_min must be positive");
    if (!(ring_inner < ring_outer)) throw Error("safety spec: annulus inner radius must be below outer");
    if (!(gamma > 0.0)) throw Error("safety spec: gamma must be positive");
  }

  double ring_center() const { return 0.5 * (ring_inner + ring_outer); }
  double ring_half_width() const { return 0.5 * (ring_outer - ring_inner); }
};

inline double distance_to_other(const SafetySpec& spec, const Vec& x, double t) {
  return (x.head<2>() - spec.other.position(t)).norm();
}

// User specification phi0; the safe set is its zero sublevel set.
inline double phi0(const SafetySpec& spec, const Vec& x, double t) {
  const double d = distance_to_other(spec, x, t);
  if (spec.task == TaskKind::CollisionAvoidance) return spec.d_min - d;
  const double e = d - spec.ring_center();
  return e * e - spec.ring_half_width() * spec.ring_half_width();
}

// Parameterized safety index
//   collision: d_min^a0 - d^a0 - a1 * ddot + beta
//   following: (d - c)^2 - w^2 + a1 * d/dt[(d - c)^2] + beta
// where ddot is the rate of change of the distance to the other point.
// The exponent a0 only enters the collision form.
class SafetyIndex {
 public:
  double alpha0 = 1.0;
  double alpha1 = 0.0;
  double beta = 0.0;
  SafetySpec spec;
  double dt = 0.1;
  double epsilon = 0.0;
  // Measured constants.
  double M_f = 0.0;
  double M_phi = 0.0;
  double k_f = 0.0;
  double k_phi = 0.0;
  double delta_f = 0.0;

  SafetyIndex() = default;
  SafetyIndex(double a0, double a1, double b, SafetySpec s, double step)
      : alpha0(a0), alpha1(a1), beta(b), spec(std::move(s)), dt(step) {}

  // Remainder margin, always derived from the current constants.
  double zeta() const { return 0.5 * M_f * M_f * M_phi * dt * dt; }

  template <typename T>
  T eval(const T& px, const T& py, const T& v, const T& theta, double t) const {
    using std::cos;
    using std::pow;
    using std::sin;
    using std::sqrt;
    const Eigen::Vector2d o = spec.other.position(t);
    const Eigen::Vector2d ov = spec.other.velocity;
    const T rx = px - o.x();
    const T ry = py - o.y();
    const double d2 = value_of(rx) * value_of(rx) + value_of(ry) * value_of(ry);
    if (d2 == 0.0) throw Error("safety index: state coincides with the obstacle (d = 0)");
    const T d = sqrt(rx * rx + ry * ry);
    const T vx = v * cos(theta) - ov.x();
    const T vy = v * sin(theta) - ov.y();
    const T ddot = (rx * vx + ry * vy) / d;
    if (spec.task == TaskKind::CollisionAvoidance) {
      return std::pow(spec.d_min, alpha0) - pow(d, alpha0) - alpha1 * ddot + beta;
    }
    const T e = d - spec.ring_center();
    const double w = spec.ring_half_width();
    return e * e - w * w + alpha1 * 2.0 * e * ddot + beta;
  }

  double phi(const Vec& x, double t) const { return eval<double>(x[0], x[1], x[2], x[3], t); }

  Jet<4> jet(const Vec& x, double t) const {
    using J = Jet<4>;
    return eval<J>(J::variable(x[0], 0), J::variable(x[1], 1), J::variable(x[2], 2), J::variable(x[3], 3), t);
  }

  Vec grad(const Vec& x, double t) const { return jet(x, t).g; }
  Mat hessian(const Vec& x, double t) const { return jet(x, t).h; }
};

inline double phi(const SafetyIndex& index, const Vec& x, double t) { return index.phi(x, t); }
inline Vec grad_phi(const SafetyIndex& index, const Vec& x, double t) { return index.grad(x, t); }

inline double spectral_norm_symmetric(const Mat& h) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (h + h.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

// Region of the state space used for sampling: a box minus a disc of radius
// `shell` around the other point at t = 0 (where the index is singular).
struct StateRegion {
  Box box = unicycle_state_box();
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double shell = 0.05;

  template <typename Rng>
  Vec sample(Rng& rng) const {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int attempt = 0; attempt < 100000; ++attempt) {
      Vec x(box.dim());
      for (Eigen::Index i = 0; i < box.dim(); ++i) x[i] = box.lower[i] + uni(rng) * (box.upper[i] - box.lower[i]);
      if (box.dim() < 2 || (x.head<2>() - center).norm() >= shell) return x;
    }
    throw Error("state region: shell covers the whole box");
  }
};

inline double hessian_norm_bound(const SafetyIndex& index, const StateRegion& region, int samples,
                                 std::uint64_t seed, double t = 0.0) {
  std::mt19937_64 rng(seed);
  double m = 0.0;
  for (int i = 0; i < samples; ++i) m = std::max(m, spectral_norm_symmetric(index.hessian(region.sample(rng), t)));
  return 1.2 * m;
}

inline double remainder_margin(double M_f, double M_phi, double dt) { return 0.5 * M_f * M_f * M_phi * dt * dt; }

// Linear map f -> grad(phi)(x_k)^T dt f + phi(x_k) appended after the network.
struct TaylorLayer {
  Vec weight;
  double bias = 0.0;

  double apply(const Vec& f) const { return weight.dot(f) + bias; }
};

inline TaylorLayer taylor_layer(const SafetyIndex& index, const Vec& x, double t) {
  const Jet<4> j = index.jet(x, t);
  return {j.g * index.dt, j.v};
}

// Corner of [f_lo, f_hi] maximizing the Taylor layer; ties take the lower
// corner (the affine value is the same either way).
inline Vec worst_case_corner(const TaylorLayer& taylor, const Vec& f_lo, const Vec& f_hi) {
  if (f_lo.size() != taylor.weight.size() || f_hi.size() != taylor.weight.size()) {
    throw DimensionError("worst_case_corner: box and Taylor weight sizes differ");
  }
  Vec out(f_lo.size());
  for (Eigen::Index i = 0; i < f_lo.size(); ++i) out[i] = taylor.weight[i] > 0.0 ? f_hi[i] : f_lo[i];
  return out;
}

struct ModelConstants {
  double k_f = 0.0;
  double M_f = 0.0;
  double delta_f = 0.0;
};

struct IndexConstants {
  double k_phi = 0.0;
  double M_phi = 0.0;
};

struct LipschitzConstants {
  double k_f = 0.0;
  double k_phi = 0.0;
  double M_f = 0.0;
  double delta_f = 0.0;
};

template <typename Rng>
Vec sample_box(const Box& b, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Vec x(b.dim());
  for (Eigen::Index i = 0; i < b.dim(); ++i) x[i] = b.lower[i] + uni(rng) * (b.upper[i] - b.lower[i]);
  return x;
}

// Sampled model constants over region x control set: Lipschitz constant of
// f from random pairs (x1.2), norm bound (x1.1), and the largest half-diagonal
// of the relaxed output box at point inputs under per-step bounds.
inline ModelConstants model_constants(const NeuralDynamics& model, const StateRegion& region, const Box& controls,
                                      int samples, std::uint64_t seed, BoundsMethod method) {
  std::mt19937_64 rng(seed);
  ModelConstants c;
  for (int i = 0; i < samples; ++i) {
    const Vec x1 = region.sample(rng), u1 = sample_box(controls, rng);
    const Vec x2 = region.sample(rng), u2 = sample_box(controls, rng);
    const Vec z1 = model.join(x1, u1), z2 = model.join(x2, u2);
    const Vec f1 = model.forward_input(z1), f2 = model.forward_input(z2);
    const double dz = (z1 - z2).norm();
    if (dz > 0.0) c.k_f = std::max(c.k_f, (f1 - f2).norm() / dz);
    c.M_f = std::max({c.M_f, f1.norm(), f2.norm()});
    const LayerBounds b = compute_bounds(model, per_step_box(x1, controls), method);
    const AffineBounds rel = output_relaxation(model, b);
    c.delta_f = std::max(c.delta_f, 0.5 * (rel.upper_at(z1) - rel.lower_at(z1)).norm());
  }
  c.k_f *= 1.2;
  c.M_f *= 1.1;
  return c;
}

inline IndexConstants index_constants(const SafetyIndex& index, const StateRegion& region, int samples,
                                      std::uint64_t seed, double t = 0.0) {
  std::mt19937_64 rng(seed);
  IndexConstants c;
  for (int i = 0; i < samples; ++i) {
    const Vec a = region.sample(rng), b = region.sample(rng);
    const double dx = (a - b).norm();
    if (dx > 0.0) c.k_phi = std::max(c.k_phi, std::abs(index.phi(a, t) - index.phi(b, t)) / dx);
  }
  c.k_phi *= 1.2;
  c.M_phi = hessian_norm_bound(index, region, samples, seed + 1, t);
  return c;
}

inline LipschitzConstants lipschitz_constants(const NeuralDynamics& model, const SafetyIndex& index,
                                              const StateRegion& region, const Box& controls, int samples,
                                              std::uint64_t seed, BoundsMethod method = BoundsMethod::DUAL) {
  const ModelConstants m = model_constants(model, region, controls, samples, seed, method);
  const IndexConstants p = index_constants(index, region, samples, seed + 7);
  return {m.k_f, p.k_phi, m.M_f, m.delta_f};
}

// Safety index file: one line
//   sis v1 <task> alpha0 alpha1 beta gamma zeta eps Mf Mphi kf kphi deltaf
inline void write_index(std::ostream& os, const SafetyIndex& s) {
  using detail::fmt17;
  os << "sis v1 " << to_string(s.spec.task) << ' ' << fmt17(s.alpha0) << ' ' << fmt17(s.alpha1) << ' '
     << fmt17(s.beta) << ' ' << fmt17(s.spec.gamma) << ' ' << fmt17(s.zeta()) << ' ' << fmt17(s.epsilon) << ' '
     << fmt17(s.M_f) << ' ' << fmt17(s.M_phi) << ' ' << fmt17(s.k_f) << ' ' << fmt17(s.k_phi) << ' '
     << fmt17(s.delta_f) << '\n';
}

// Reads an index for a given spec geometry and step. The stored zeta must
// agree with the one recomputed from Mf, Mphi and dt.
inline SafetyIndex read_index(std::istream& is, SafetySpec spec, double dt) {
  std::string tag, version, task;
  if (!(is >> tag >> version) || tag != "sis" || version != "v1") throw FormatError("index file: missing 'sis v1' header");
  if (!(is >> task)) throw FormatError("index file: missing task");
  double vals[11];
  const char* names[11] = {"alpha0", "alpha1", "beta", "gamma", "zeta", "eps", "Mf", "Mphi", "kf", "kphi", "deltaf"};
  for (int i = 0; i < 11; ++i) {
    std::string tok;
    if (!(is >> tok)) throw FormatError(std::string("index file: missing ") + names[i]);
    vals[i] = detail::parse_double(tok, names[i]);
    if (!std::isfinite(vals[i])) throw FormatError(std::string("index file: non-finite ") + names[i]);
  }
  spec.task = parse_task(task);
  spec.gamma = vals[3];
  spec.validate();
  SafetyIndex s(vals[0], vals[1], vals[2], spec, dt);
  s.epsilon = vals[5];
  s.M_f = vals[6];
  s.M_phi = vals[7];
  s.k_f = vals[8];
  s.k_phi = vals[9];
  s.delta_f = vals[10];
  if (std::abs(s.zeta() - vals[4]) > 1e-12 * std::max(1.0, std::abs(vals[4]))) {
    throw FormatError("index file: stored zeta " + detail::fmt17(vals[4]) + " disagrees with recomputed " +
                      detail::fmt17(s.zeta()));
  }
  return s;
}

inline void save_index(const std::string& path, const SafetyIndex& s) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_index(os, s);
}

inline SafetyIndex load_index(const std::string& path, const SafetySpec& spec, double dt) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open index file '" + path + "'");
  return read_index(is, spec, dt);
}

}  // namespace bond
