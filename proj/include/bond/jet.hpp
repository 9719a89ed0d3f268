#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace bond {

// Second-order forward-mode jet: value, gradient and Hessian with respect
// to N independent variables.
template <int N>
struct Jet {
  using Grad = Eigen::Matrix<double, N, 1>;
  using Hess = Eigen::Matrix<double, N, N>;

  double v = 0.0;
  Grad g = Grad::Zero();
  Hess h = Hess::Zero();

  Jet() = default;
  Jet(double value) : v(value) {}  // NOLINT: constants promote implicitly
  Jet(double value, const Grad& grad, const Hess& hess) : v(value), g(grad), h(hess) {}

  static Jet variable(double value, int index) {
    Jet j(value);
    j.g[index] = 1.0;
    return j;
  }
};

// Applies a scalar function with first and second derivatives d1, d2.
template <int N>
Jet<N> chain(const Jet<N>& a, double f, double d1, double d2) {
  return {f, d1 * a.g, d1 * a.h + d2 * a.g * a.g.transpose()};
}

template <int N>
Jet<N> operator+(const Jet<N>& a, const Jet<N>& b) {
  return {a.v + b.v, a.g + b.g, a.h + b.h};
}
template <int N>
Jet<N> operator-(const Jet<N>& a, const Jet<N>& b) {
  return {a.v - b.v, a.g - b.g, a.h - b.h};
}
template <int N>
Jet<N> operator-(const Jet<N>& a) {
  return {-a.v, -a.g, -a.h};
}
template <int N>
Jet<N> operator*(const Jet<N>& a, const Jet<N>& b) {
  return {a.v * b.v, a.g * b.v + b.g * a.v,
          a.h * b.v + b.h * a.v + a.g * b.g.transpose() + b.g * a.g.transpose()};
}
template <int N>
Jet<N> inverse(const Jet<N>& a) {
  const double iv = 1.0 / a.v;
  return chain(a, iv, -iv * iv, 2.0 * iv * iv * iv);
}
template <int N>
Jet<N> operator/(const Jet<N>& a, const Jet<N>& b) {
  return a * inverse(b);
}

template <int N>
Jet<N> operator+(const Jet<N>& a, double b) { return {a.v + b, a.g, a.h}; }
template <int N>
Jet<N> operator+(double b, const Jet<N>& a) { return a + b; }
template <int N>
Jet<N> operator-(const Jet<N>& a, double b) { return {a.v - b, a.g, a.h}; }
template <int N>
Jet<N> operator-(double b, const Jet<N>& a) { return {b - a.v, -a.g, -a.h}; }
template <int N>
Jet<N> operator*(const Jet<N>& a, double b) { return {a.v * b, a.g * b, a.h * b}; }
template <int N>
Jet<N> operator*(double b, const Jet<N>& a) { return a * b; }
template <int N>
Jet<N> operator/(const Jet<N>& a, double b) { return a * (1.0 / b); }

template <int N>
Jet<N> sqrt(const Jet<N>& a) {
  const double s = std::sqrt(a.v);
  return chain(a, s, 0.5 / s, -0.25 / (s * a.v));
}
template <int N>
Jet<N> pow(const Jet<N>& a, double p) {
  const double f = std::pow(a.v, p);
  return chain(a, f, p * std::pow(a.v, p - 1.0), p * (p - 1.0) * std::pow(a.v, p - 2.0));
}
template <int N>
Jet<N> cos(const Jet<N>& a) {
  return chain(a, std::cos(a.v), -std::sin(a.v), -std::cos(a.v));
}
template <int N>
Jet<N> sin(const Jet<N>& a) {
  return chain(a, std::sin(a.v), std::cos(a.v), -std::sin(a.v));
}

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Jet<N>& j) {
  return j.v;
}

}  // namespace bond
