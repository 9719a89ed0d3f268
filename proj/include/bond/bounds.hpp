#pragma once

#include "bond/nndm.hpp"

#include <ostream>

namespace bond {

enum class BoundsMethod { IA, DUAL };

inline const char* to_string(BoundsMethod m) { return m == BoundsMethod::IA ? "ia" : "dual"; }

inline BoundsMethod parse_bounds_method(const std::string& s) {
  if (s == "ia" || s == "IA") return BoundsMethod::IA;
  if (s == "dual" || s == "DUAL" || s == "convdual") return BoundsMethod::DUAL;
  throw Error("unknown bounds method '" + s + "' (expected ia or dual)");
}

// Pre-activation intervals for every layer, output layer included.
struct LayerBounds {
  std::vector<Vec> lower;
  std::vector<Vec> upper;
  BoundsMethod method = BoundsMethod::IA;
  InputBox box;

  std::size_t num_layers() const { return lower.size(); }

  int unstable_count() const {
    int n = 0;
    for (std::size_t i = 0; i + 1 < lower.size(); ++i)
      for (Eigen::Index j = 0; j < lower[i].size(); ++j)
        if (lower[i][j] < 0.0 && upper[i][j] > 0.0) ++n;
    return n;
  }
};

// Per-neuron linear relaxation of ReLU used by the backward pass:
//   lower_slope * zhat <= relu(zhat) <= upper_slope * zhat + upper_intercept.
struct ReluRelaxation {
  double lower_slope = 0.0;
  double upper_slope = 0.0;
  double upper_intercept = 0.0;
};

inline ReluRelaxation relax_relu(double l, double u) {
  if (l >= 0.0) return {1.0, 1.0, 0.0};
  if (u <= 0.0) return {0.0, 0.0, 0.0};
  const double s = u / (u - l);
  return {(-l >= u) ? 0.0 : 1.0, s, -s * l};
}

// Affine functions of the network input z0 that sandwich C * zhat_layer over
// the relaxed network: lower_A z0 + lower_c <= C zhat <= upper_A z0 + upper_c.
struct AffineBounds {
  Mat lower_A, upper_A;
  Vec lower_c, upper_c;

  Vec lower_at(const Vec& z0) const { return lower_A * z0 + lower_c; }
  Vec upper_at(const Vec& z0) const { return upper_A * z0 + upper_c; }

  // Concretization over a box.
  Vec lower_over(const Box& box) const {
    return lower_A.cwiseMax(0.0) * box.lower + lower_A.cwiseMin(0.0) * box.upper + lower_c;
  }
  Vec upper_over(const Box& box) const {
    return upper_A.cwiseMax(0.0) * box.upper + upper_A.cwiseMin(0.0) * box.lower + upper_c;
  }
};

inline void check_box(const NeuralDynamics& model, const InputBox& box) {
  if (box.dim() != model.input_dim()) {
    throw DimensionError("input box has " + std::to_string(box.dim()) + " coordinates, model input is " +
                         std::to_string(model.input_dim()));
  }
}

// Interval image of [lo, hi] under W z + b.
inline std::pair<Vec, Vec> interval_affine(const Layer& l, const Vec& lo, const Vec& hi) {
  const Mat wp = l.weight.cwiseMax(0.0);
  const Mat wn = l.weight.cwiseMin(0.0);
  return {wp * lo + wn * hi + l.bias, wp * hi + wn * lo + l.bias};
}

inline LayerBounds ia_bounds(const NeuralDynamics& model, const InputBox& box) {
  check_box(model, box);
  LayerBounds out;
  out.method = BoundsMethod::IA;
  out.box = box;
  Vec lo = box.lower, hi = box.upper;
  for (const Layer& l : model.layers()) {
    auto [pl, pu] = interval_affine(l, lo, hi);
    out.lower.push_back(pl);
    out.upper.push_back(pu);
    lo = pl.cwiseMax(0.0);
    hi = pu.cwiseMax(0.0);
  }
  return out;
}

// Backward substitution of C * zhat_layer through layers layer-1 .. 0, using
// the relaxations induced by `bounds` for the hidden layers below `layer`.
inline AffineBounds backward_bounds(const NeuralDynamics& model, const LayerBounds& bounds, std::size_t layer,
                                    const Mat& C) {
  const Layer& top = model.layer(layer);
  if (C.cols() != top.rows()) throw DimensionError("backward_bounds: objective width mismatch");
  Mat up = C * top.weight;
  Mat lo = up;
  Vec up_c = C * top.bias;
  Vec lo_c = up_c;
  for (std::size_t i = layer; i-- > 0;) {
    const Layer& l = model.layer(i);
    // up/lo currently multiply z_i = relu(zhat_i); express in zhat_i.
    const Eigen::Index k = l.rows();
    for (Eigen::Index j = 0; j < k; ++j) {
      const ReluRelaxation r = relax_relu(bounds.lower[i][j], bounds.upper[i][j]);
      for (Eigen::Index row = 0; row < up.rows(); ++row) {
        const double a = up(row, j);
        if (a >= 0.0) {
          up(row, j) = a * r.upper_slope;
          up_c[row] += a * r.upper_intercept;
        } else {
          up(row, j) = a * r.lower_slope;
        }
        const double b = lo(row, j);
        if (b >= 0.0) {
          lo(row, j) = b * r.lower_slope;
        } else {
          lo(row, j) = b * r.upper_slope;
          lo_c[row] += b * r.upper_intercept;
        }
      }
    }
    up_c += up * l.bias;
    lo_c += lo * l.bias;
    up = up * l.weight;
    lo = lo * l.weight;
  }
  return {lo, up, lo_c, up_c};
}

// Backward linear (dual-network style) bounds. The first layer is affine in
// the input, so it gets the exact interval; every later layer takes the
// intersection of its backward bound and the interval image of the layer
// below, so the result is never looser than plain interval propagation.
inline LayerBounds dual_bounds(const NeuralDynamics& model, const InputBox& box) {
  check_box(model, box);
  LayerBounds out;
  out.method = BoundsMethod::DUAL;
  out.box = box;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const Layer& l = model.layer(i);
    Vec lo, hi;
    if (i == 0) {
      std::tie(lo, hi) = interval_affine(l, box.lower, box.upper);
    } else {
      auto [il, iu] = interval_affine(l, out.lower[i - 1].cwiseMax(0.0), out.upper[i - 1].cwiseMax(0.0));
      const AffineBounds ab = backward_bounds(model, out, i, Mat::Identity(l.rows(), l.rows()));
      lo = ab.lower_over(box).cwiseMax(il);
      hi = ab.upper_over(box).cwiseMin(iu);
      // Guard against round-off inverting a point interval.
      for (Eigen::Index j = 0; j < lo.size(); ++j)
        if (lo[j] > hi[j]) lo[j] = hi[j] = 0.5 * (lo[j] + hi[j]);
    }
    out.lower.push_back(lo);
    out.upper.push_back(hi);
  }
  return out;
}

inline LayerBounds compute_bounds(const NeuralDynamics& model, const InputBox& box, BoundsMethod m) {
  return m == BoundsMethod::IA ? ia_bounds(model, box) : dual_bounds(model, box);
}

// Input box for one control step: the state is pinned to x_k and the control
// ranges over the control set.
inline InputBox per_step_box(const Vec& x, const Box& control_box) {
  Vec lo(x.size() + control_box.dim()), hi(x.size() + control_box.dim());
  lo << x, control_box.lower;
  hi << x, control_box.upper;
  return {lo, hi};
}

// Affine sandwich of the network output (state derivative) as a function of
// the input, valid for every input in bounds.box.
inline AffineBounds output_relaxation(const NeuralDynamics& model, const LayerBounds& bounds) {
  const std::size_t last = model.num_layers() - 1;
  return backward_bounds(model, bounds, last, Mat::Identity(model.state_dim(), model.state_dim()));
}

inline void write_bounds_csv(std::ostream& os, const LayerBounds& b, bool header = true) {
  if (header) os << "layer,neuron,lhat,uhat,method\n";
  for (std::size_t i = 0; i < b.lower.size(); ++i)
    for (Eigen::Index j = 0; j < b.lower[i].size(); ++j)
      os << (i + 1) << ',' << j << ',' << detail::fmt17(b.lower[i][j]) << ',' << detail::fmt17(b.upper[i][j]) << ','
         << to_string(b.method) << '\n';
}

}  // namespace bond
