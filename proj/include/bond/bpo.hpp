#pragma once

#include "bond/bounds.hpp"

#include <array>

namespace bond {

enum class NeuronKind { Unstable, Active, Inactive, Degenerate };

// Degree-K Bernstein upper envelope of relu on [lhat, uhat], stored in the
// monomial basis: g(z) = coeffs[0] + coeffs[1] z + ... + coeffs[K] z^K.
struct BpoEnvelope {
  int degree = 1;
  double lhat = 0.0;
  double uhat = 0.0;
  NeuronKind kind = NeuronKind::Unstable;
  std::vector<double> coeffs;

  bool degenerate() const { return kind == NeuronKind::Degenerate; }
  bool stable() const { return kind != NeuronKind::Unstable; }
};

// One-sided affine constraint z >= slope * zhat + intercept.
struct LowerLine {
  double slope = 0.0;
  double intercept = 0.0;
};

namespace detail {

inline std::vector<double> poly_mul(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> r(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) r[i + j] += a[i] * b[j];
  return r;
}

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace detail

inline BpoEnvelope build_envelope(double lhat, double uhat, int K) {
  if (!(lhat <= uhat)) {
    throw Error("build_envelope: lhat " + detail::fmt17(lhat) + " exceeds uhat " + detail::fmt17(uhat));
  }
  if (K != 1 && K != 2) throw Error("build_envelope: degree must be 1 or 2, got " + std::to_string(K));
  BpoEnvelope e;
  e.degree = K;
  e.lhat = lhat;
  e.uhat = uhat;
  if (uhat == lhat) {
    e.kind = NeuronKind::Degenerate;
    e.coeffs = {std::max(0.0, lhat)};
    return e;
  }
  if (lhat >= 0.0) {
    e.kind = NeuronKind::Active;
    e.coeffs = {0.0, 1.0};
    return e;
  }
  if (uhat <= 0.0) {
    e.kind = NeuronKind::Inactive;
    e.coeffs = {0.0};
    return e;
  }
  // sum_k relu(l + k/K (u-l)) C(K,k) (u-z)^(K-k) (z-l)^k / (u-l)^K
  const double w = uhat - lhat;
  const std::vector<double> down{uhat / w, -1.0 / w};  // (u - z)/(u - l)
  const std::vector<double> up{-lhat / w, 1.0 / w};    // (z - l)/(u - l)
  std::vector<double> g(K + 1, 0.0);
  for (int k = 0; k <= K; ++k) {
    const double node = std::max(0.0, lhat + (static_cast<double>(k) / K) * w);
    if (node == 0.0) continue;
    std::vector<double> term{node * detail::binomial(K, k)};
    for (int i = 0; i < K - k; ++i) term = detail::poly_mul(term, down);
    for (int i = 0; i < k; ++i) term = detail::poly_mul(term, up);
    for (std::size_t i = 0; i < term.size(); ++i) g[i] += term[i];
  }
  e.kind = NeuronKind::Unstable;
  e.coeffs = std::move(g);
  return e;
}

inline double eval_poly(const std::vector<double>& c, double z) {
  double v = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) v = v * z + c[i];
  return v;
}

// Upper envelope value. Arguments outside [lhat, uhat] are clamped: the
// envelope is only certified on its interval.
inline double eval_upper(const BpoEnvelope& e, double zhat) {
  double z = zhat;
  if (z < e.lhat || z > e.uhat) {
    BOND_LOG_INFO("eval_upper: " << zhat << " outside [" << e.lhat << ", " << e.uhat << "], clamped");
    z = std::clamp(z, e.lhat, e.uhat);
  }
  return eval_poly(e.coeffs, z);
}

inline double eval_upper_derivative(const BpoEnvelope& e, double zhat) {
  double d = 0.0;
  for (std::size_t i = e.coeffs.size(); i-- > 1;) d = d * zhat + static_cast<double>(i) * e.coeffs[i];
  return d;
}

inline std::array<LowerLine, 2> lower_lines(const BpoEnvelope&) { return {LowerLine{0.0, 0.0}, LowerLine{1.0, 0.0}}; }

inline double eval_lower(const BpoEnvelope& e, double zhat) {
  double v = -kInf;
  for (const LowerLine& l : lower_lines(e)) v = std::max(v, l.slope * zhat + l.intercept);
  return v;
}

// Envelopes for every hidden neuron, indexed [layer][neuron].
using EnvelopeSet = std::vector<std::vector<BpoEnvelope>>;

inline EnvelopeSet build_envelopes(const LayerBounds& b, int K) {
  EnvelopeSet out;
  for (std::size_t i = 0; i + 1 < b.num_layers(); ++i) {
    std::vector<BpoEnvelope> layer;
    layer.reserve(b.lower[i].size());
    for (Eigen::Index j = 0; j < b.lower[i].size(); ++j) layer.push_back(build_envelope(b.lower[i][j], b.upper[i][j], K));
    out.push_back(std::move(layer));
  }
  return out;
}

}  // namespace bond
