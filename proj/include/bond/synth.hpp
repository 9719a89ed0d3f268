#pragma once

#include "bond/safety.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <numeric>

namespace bond {

enum class SynthMode { Plain, WorstCase };

inline const char* to_string(SynthMode m) { return m == SynthMode::Plain ? "plain" : "worst_case"; }

struct SynthConfig {
  int sample_count = 5000;
  int population = 24;
  int generations = 12;
  double elite_fraction = 0.25;
  int grid = 17;  // control grid per axis
  int constant_samples = 2000;
  std::uint64_t seed = 1;
  SynthMode mode = SynthMode::WorstCase;
  BoundsMethod bounds_method = BoundsMethod::DUAL;
  StateRegion region;
  Box controls = unicycle_control_box();
  int jobs = 1;
  // parameter ranges (alpha0, alpha1, beta)
  Eigen::Vector3d lower{1.0, 0.0, 0.0};
  Eigen::Vector3d upper{3.0, 3.0, 1.0};

  void validate() const {
    if (sample_count < 1) throw Error("synth: sample_count must be at least 1");
    if (population < 2) throw Error("synth: population must be at least 2");
    if (generations < 1) throw Error("synth: generations must be at least 1");
    if (grid < 2) throw Error("synth: grid must have at least 2 points per axis");
    if (!(elite_fraction > 0.0 && elite_fraction <= 1.0)) throw Error("synth: elite_fraction must be in (0, 1]");
  }
};

struct SynthGeneration {
  int generation = 0;
  double r_best = 1.0;
  double r0_best = 1.0;  // unmargined rate of the same candidate
  Eigen::Vector3d params = Eigen::Vector3d::Zero();
  double epsilon = 0.0;
};

struct SynthReport {
  Eigen::Vector3d params = Eigen::Vector3d::Zero();
  double r = 1.0;
  double r_unmargined = 1.0;
  std::vector<SynthGeneration> history;
  double epsilon = 0.0;
  double delta = 0.0;
  double wall_time = 0.0;
  bool certified = false;
};

template <typename Rng>
std::vector<Vec> sample_states(const StateRegion& region, int n, Rng& rng) {
  if (n < 1) throw Error("sample_states: need at least one sample");
  std::vector<Vec> s;
  s.reserve(n);
  for (int i = 0; i < n; ++i) s.push_back(region.sample(rng));
  return s;
}

inline std::vector<Vec> sample_states(const StateRegion& region, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_states(region, n, rng);
}

// Mean Euclidean nearest-neighbor distance; 0 for a single sample.
inline double mean_nearest_neighbor(const std::vector<Vec>& s) {
  if (s.size() < 2) return 0.0;
  const Eigen::Index d = s.front().size();
  Mat pts(d, static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) pts.col(static_cast<Eigen::Index>(i)) = s[i];
  double total = 0.0;
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    const Vec dist2 = (pts.colwise() - pts.col(i)).colwise().squaredNorm();
    double best = kInf;
    for (Eigen::Index j = 0; j < pts.cols(); ++j)
      if (j != i) best = std::min(best, dist2[j]);
    total += std::sqrt(best);
  }
  return total / static_cast<double>(pts.cols());
}

inline double epsilon_margin(double k_phi, double delta, double delta_f, double k_f, double dt) {
  return k_phi * (2.0 * delta + 2.0 * delta_f * dt + k_f * delta * dt);
}

// Control grid over the box, row-major in (u0, u1, ...) with `n` points per axis.
inline std::vector<Vec> control_grid(const Box& controls, int n) {
  const Eigen::Index m = controls.dim();
  std::vector<Vec> out;
  std::vector<int> idx(m, 0);
  while (true) {
    Vec u(m);
    for (Eigen::Index i = 0; i < m; ++i)
      u[i] = controls.lower[i] + (controls.upper[i] - controls.lower[i]) * idx[i] / static_cast<double>(n - 1);
    out.push_back(u);
    Eigen::Index k = m - 1;
    while (k >= 0 && ++idx[k] == n) idx[k--] = 0;
    if (k < 0) break;
  }
  return out;
}

// Relaxed output of the network at a fixed state: f_lo/f_hi as affine
// functions of the input, valid for every control in the control box.
struct StateRelaxation {
  Vec x;
  AffineBounds relax;
};

inline StateRelaxation relax_at(const NeuralDynamics& model, const Vec& x, const Box& controls, BoundsMethod method) {
  const LayerBounds b = compute_bounds(model, per_step_box(x, controls), method);
  return {x, output_relaxation(model, b)};
}

struct FeasibilityResult {
  bool feasible = false;
  double best_lhs = kInf;  // min over tried controls of phi at the next state
  double rhs = 0.0;
  Vec u;
};

// Smallest phi at the worst-case (or nominal) next state over the control
// grid plus one local refinement around the best grid point.
inline FeasibilityResult min_next_phi(const NeuralDynamics& model, const SafetyIndex& index, const StateRelaxation& sr,
                                      const Box& controls, int grid, bool worst_case, double t = 0.0) {
  const Vec& x = sr.x;
  const TaylorLayer tl = taylor_layer(index, x, t);
  const double dt = model.dt();
  FeasibilityResult res;
  auto lhs = [&](const Vec& u) {
    const Vec z0 = model.join(x, u);
    Vec f;
    if (worst_case) f = worst_case_corner(tl, sr.relax.lower_at(z0), sr.relax.upper_at(z0));
    else f = model.forward_input(z0);
    const Vec xn = x + f * dt;
    if ((xn.head<2>() - index.spec.other.position(t + dt)).squaredNorm() == 0.0) return kInf;
    return index.phi(xn, t + dt);
  };
  auto consider = [&](const Vec& u) {
    const double v = lhs(u);
    if (v < res.best_lhs) {
      res.best_lhs = v;
      res.u = u;
    }
  };
  for (const Vec& u : control_grid(controls, grid)) consider(u);
  const Vec h = (controls.upper - controls.lower) / static_cast<double>(grid - 1);
  const Vec center = res.u;
  for (const Vec& off : control_grid(Box{-h, h}, 5)) consider((center + off).cwiseMax(controls.lower).cwiseMin(controls.upper));
  return res;
}

inline double feasibility_rhs(const SafetyIndex& index, double phi_x, double eps) {
  return std::max(-eps, phi_x - index.spec.gamma * index.dt - eps);
}

inline FeasibilityResult is_feasible(const Vec& x, const SafetyIndex& index, const NeuralDynamics& model,
                                     BoundsMethod method, const Box& controls, int grid, double eps,
                                     bool worst_case = true) {
  const StateRelaxation sr = relax_at(model, x, controls, method);
  FeasibilityResult r = min_next_phi(model, index, sr, controls, grid, worst_case);
  r.rhs = feasibility_rhs(index, index.phi(x, 0.0), eps);
  r.feasible = r.best_lhs <= r.rhs;
  return r;
}

namespace detail {

struct Candidate {
  Eigen::Vector3d params;
  double r = 1.0;
  double r0 = 1.0;
  double epsilon = 0.0;
  IndexConstants constants;
};

inline bool better(const Candidate& a, const Candidate& b) {
  if (a.r != b.r) return a.r < b.r;
  return a.r0 < b.r0;
}

}  // namespace detail

class Synthesizer {
 public:
  Synthesizer(const NeuralDynamics& model, SafetySpec spec, SynthConfig cfg)
      : model_(model), spec_(std::move(spec)), cfg_(std::move(cfg)) {
    cfg_.validate();
    spec_.validate();
    states_ = sample_states(cfg_.region, cfg_.sample_count, cfg_.seed);
    delta_ = mean_nearest_neighbor(states_);
    constants_ = model_constants(model_, cfg_.region, cfg_.controls, cfg_.constant_samples, cfg_.seed + 11,
                                 cfg_.bounds_method);
    if (cfg_.mode == SynthMode::WorstCase) {
      relax_.resize(states_.size());
      parallel_for(static_cast<int>(states_.size()), cfg_.jobs, [&](int i) {
        relax_[i] = relax_at(model_, states_[i], cfg_.controls, cfg_.bounds_method);
      });
    }
  }

  const std::vector<Vec>& states() const { return states_; }
  double delta() const { return delta_; }
  const ModelConstants& model_constants_used() const { return constants_; }

  SafetyIndex make_index(const Eigen::Vector3d& p) const {
    SafetyIndex idx(p[0], p[1], p[2], spec_, model_.dt());
    idx.M_f = constants_.M_f;
    idx.k_f = constants_.k_f;
    idx.delta_f = cfg_.mode == SynthMode::WorstCase ? constants_.delta_f : 0.0;
    const IndexConstants c = index_constants(idx, cfg_.region, cfg_.constant_samples, cfg_.seed + 23);
    idx.k_phi = c.k_phi;
    idx.M_phi = c.M_phi;
    idx.epsilon = cfg_.mode == SynthMode::WorstCase
                      ? epsilon_margin(idx.k_phi, delta_, idx.delta_f, idx.k_f, idx.dt)
                      : 0.0;
    return idx;
  }

  // Infeasible rates with the index's margin and without it.
  std::pair<double, double> rates(const SafetyIndex& idx) const {
    std::vector<char> bad(states_.size()), bad0(states_.size());
    const bool wc = cfg_.mode == SynthMode::WorstCase;
    parallel_for(static_cast<int>(states_.size()), cfg_.jobs, [&](int i) {
      const StateRelaxation sr = wc ? relax_[i] : StateRelaxation{states_[i], {}};
      const FeasibilityResult f = min_next_phi(model_, idx, sr, cfg_.controls, cfg_.grid, wc);
      const double phi_x = idx.phi(states_[i], 0.0);
      bad[i] = f.best_lhs > feasibility_rhs(idx, phi_x, idx.epsilon);
      bad0[i] = f.best_lhs > feasibility_rhs(idx, phi_x, 0.0);
    });
    const double n = static_cast<double>(states_.size());
    return {std::accumulate(bad.begin(), bad.end(), 0.0) / n, std::accumulate(bad0.begin(), bad0.end(), 0.0) / n};
  }

  std::pair<SafetyIndex, SynthReport> run(std::ostream* log = nullptr) const {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(cfg_.seed + 101);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Vector3d mean = 0.5 * (cfg_.lower + cfg_.upper);
    Eigen::Matrix3d cov = Eigen::Vector3d(((cfg_.upper - cfg_.lower) / 4.0).array().square()).asDiagonal();
    const int n_elite = std::max(1, static_cast<int>(std::ceil(cfg_.elite_fraction * cfg_.population)));
    detail::Candidate best;
    best.r = kInf;
    SynthReport rep;
    rep.delta = delta_;
    for (int gen = 0; gen < cfg_.generations; ++gen) {
      std::vector<detail::Candidate> pop;
      const Eigen::LLT<Eigen::Matrix3d> llt(cov);
      const Eigen::Matrix3d L = llt.matrixL();
      if (gen > 0) pop.push_back(best);  // elitism
      while (static_cast<int>(pop.size()) < cfg_.population) {
        Eigen::Vector3d z(normal(rng), normal(rng), normal(rng));
        detail::Candidate c;
        c.params = (mean + L * z).cwiseMax(cfg_.lower).cwiseMin(cfg_.upper);
        pop.push_back(c);
      }
      for (detail::Candidate& c : pop) {
        if (gen > 0 && &c == &pop.front()) continue;
        const SafetyIndex idx = make_index(c.params);
        std::tie(c.r, c.r0) = rates(idx);
        c.epsilon = idx.epsilon;
      }
      std::stable_sort(pop.begin(), pop.end(), detail::better);
      if (detail::better(pop.front(), best) || best.r == kInf) best = pop.front();
      SynthGeneration g{gen, best.r, best.r0, best.params, best.epsilon};
      rep.history.push_back(g);
      if (log) {
        nlohmann::json j;
        j["gen"] = gen;
        j["r_best"] = best.r;
        j["params"] = {best.params[0], best.params[1], best.params[2]};
        *log << j.dump() << '\n';
      }
      BOND_LOG_INFO("synth gen " << gen << " r " << best.r << " r0 " << best.r0 << " params " << best.params.transpose());
      if (best.r == 0.0) break;
      mean.setZero();
      for (int i = 0; i < n_elite; ++i) mean += pop[i].params;
      mean /= n_elite;
      cov.setZero();
      for (int i = 0; i < n_elite; ++i) cov += (pop[i].params - mean) * (pop[i].params - mean).transpose();
      cov /= n_elite;
      cov.diagonal().array() += 1e-6;
    }
    SafetyIndex idx = make_index(best.params);
    rep.params = best.params;
    rep.r = best.r;
    rep.r_unmargined = best.r0;
    rep.epsilon = idx.epsilon;
    rep.certified = best.r == 0.0;
    rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!rep.certified) BOND_LOG_INFO("synth: infeasible rate " << best.r << " > 0, index is uncertified");
    return {idx, rep};
  }

 private:
  const NeuralDynamics& model_;
  SafetySpec spec_;
  SynthConfig cfg_;
  std::vector<Vec> states_;
  std::vector<StateRelaxation> relax_;
  double delta_ = 0.0;
  ModelConstants constants_;
};

inline std::pair<SafetyIndex, SynthReport> synthesize(const NeuralDynamics& model, const SafetySpec& spec,
                                                      const SynthConfig& cfg, std::ostream* log = nullptr) {
  return Synthesizer(model, spec, cfg).run(log);
}

}  // namespace bond
