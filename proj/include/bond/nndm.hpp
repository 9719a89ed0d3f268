#pragma once

#include "bond/common.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

namespace bond {

struct Layer {
  Mat weight;  // rows = outputs, cols = inputs
  Vec bias;

  Eigen::Index rows() const { return weight.rows(); }
  Eigen::Index cols() const { return weight.cols(); }
};

// Residual ReLU dynamics x' = x + f(x, u) dt. Every layer but the last is
// followed by a ReLU; the last layer is linear and outputs the state
// derivative.
class NeuralDynamics {
 public:
  NeuralDynamics() = default;

  NeuralDynamics(std::vector<Layer> layers, int state_dim, int control_dim, double dt)
      : layers_(std::move(layers)), state_dim_(state_dim), control_dim_(control_dim), dt_(dt) {
    validate();
  }

  int state_dim() const { return state_dim_; }
  int control_dim() const { return control_dim_; }
  int input_dim() const { return state_dim_ + control_dim_; }
  double dt() const { return dt_; }
  std::size_t num_layers() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  const std::vector<Layer>& layers() const { return layers_; }

  // Number of ReLU neurons (all layers except the output layer).
  int hidden_neurons() const {
    int n = 0;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) n += static_cast<int>(layers_[i].rows());
    return n;
  }

  Vec join(const Vec& x, const Vec& u) const {
    if (x.size() != state_dim_) {
      throw DimensionError("state has " + std::to_string(x.size()) + " entries, model expects " +
                           std::to_string(state_dim_));
    }
    if (u.size() != control_dim_) {
      throw DimensionError("control has " + std::to_string(u.size()) + " entries, model expects " +
                           std::to_string(control_dim_));
    }
    Vec z(input_dim());
    z << x, u;
    return z;
  }

  // Forward pass on the stacked input z0 = [x; u].
  Vec forward_input(const Vec& z0) const {
    if (z0.size() != input_dim()) {
      throw DimensionError("layer 0: input has " + std::to_string(z0.size()) +
                           " entries, weight expects " + std::to_string(input_dim()));
    }
    Vec z = z0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Vec pre = layers_[i].weight * z + layers_[i].bias;
      z = (i + 1 < layers_.size()) ? Vec(pre.cwiseMax(0.0)) : pre;
    }
    return z;
  }

  Vec forward(const Vec& x, const Vec& u) const { return forward_input(join(x, u)); }

  // Pre-activations of every layer, including the (linear) output layer.
  std::vector<Vec> pre_activations(const Vec& z0) const {
    std::vector<Vec> out;
    out.reserve(layers_.size());
    Vec z = z0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Vec pre = layers_[i].weight * z + layers_[i].bias;
      z = pre.cwiseMax(0.0);
      out.push_back(std::move(pre));
    }
    return out;
  }

  Vec euler_step(const Vec& x, const Vec& u) const { return x + forward(x, u) * dt_; }

 private:
  void validate() const {
    if (state_dim_ <= 0) throw DimensionError("state_dim must be positive");
    if (control_dim_ < 0) throw DimensionError("control_dim must be non-negative");
    if (!(dt_ >= 0.0) || !std::isfinite(dt_)) throw Error("dt must be finite and non-negative");
    if (layers_.empty()) throw DimensionError("network has no layers");
    Eigen::Index prev = input_dim();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      if (l.cols() != prev) {
        throw DimensionError("layer " + std::to_string(i) + ": weight has " +
                             std::to_string(l.cols()) + " columns but previous layer outputs " +
                             std::to_string(prev));
      }
      if (l.bias.size() != l.rows()) {
        throw DimensionError("layer " + std::to_string(i) + ": bias has " +
                             std::to_string(l.bias.size()) + " entries but weight has " +
                             std::to_string(l.rows()) + " rows");
      }
      if (!l.weight.allFinite() || !l.bias.allFinite()) {
        throw FormatError("layer " + std::to_string(i) + ": non-finite parameter");
      }
      prev = l.rows();
    }
    if (prev != state_dim_) {
      throw DimensionError("output layer has " + std::to_string(prev) +
                           " rows, state_dim is " + std::to_string(state_dim_));
    }
  }

  std::vector<Layer> layers_;
  int state_dim_ = 0;
  int control_dim_ = 0;
  double dt_ = 0.1;
};

// "FC3-16" -> input, 16, 16, output. The depth counts linear layers, so
// FCd-w has d-1 hidden ReLU layers of width w.
inline std::vector<int> parse_arch(const std::string& arch, int input_dim = 6, int output_dim = 4) {
  std::vector<int> sizes;
  if (arch.rfind("FC", 0) == 0) {
    const auto dash = arch.find('-');
    if (dash == std::string::npos) throw Error("architecture '" + arch + "': expected FC<d>-<w>");
    int depth = 0, width = 0;
    const char* b = arch.data();
    auto r1 = std::from_chars(b + 2, b + dash, depth);
    auto r2 = std::from_chars(b + dash + 1, b + arch.size(), width);
    if (r1.ec != std::errc{} || r2.ec != std::errc{} || depth < 1 || width < 1) {
      throw Error("architecture '" + arch + "': expected FC<d>-<w>");
    }
    sizes.push_back(input_dim);
    for (int i = 0; i + 1 < depth; ++i) sizes.push_back(width);
    sizes.push_back(output_dim);
    return sizes;
  }
  std::stringstream ss(arch);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    int v = 0;
    auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (r.ec != std::errc{} || v <= 0) throw Error("architecture '" + arch + "': bad layer size");
    sizes.push_back(v);
  }
  if (sizes.size() < 2) throw Error("architecture '" + arch + "': need at least two sizes");
  return sizes;
}

// He-style random initialization; also used to build synthetic test nets.
inline NeuralDynamics random_network(const std::vector<int>& sizes, int state_dim, double dt,
                                     std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Layer> layers;
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    Layer l;
    l.weight.resize(sizes[i], sizes[i - 1]);
    l.bias.resize(sizes[i]);
    const double s = scale * std::sqrt(2.0 / sizes[i - 1]);
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = s * normal(rng);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = 0.1 * scale * normal(rng);
    layers.push_back(std::move(l));
  }
  return {std::move(layers), state_dim, sizes.front() - state_dim, dt};
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& tok, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') throw FormatError(what + ": expected a number, got '" + tok + "'");
  return v;
}

inline long parse_int(const std::string& tok, const std::string& what) {
  long v = 0;
  auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (r.ec != std::errc{} || r.ptr != tok.data() + tok.size()) {
    throw FormatError(what + ": expected an integer, got '" + tok + "'");
  }
  return v;
}

}  // namespace detail

// Text format:
//   nndm v1 <m_x> <m_u> <dt> <n_layers>
//   layer <rows> <cols>
//   <rows lines of cols weights, row-major>
//   <one line of rows biases>
// All numbers carry 17 significant digits, so the round trip is exact.
inline void write_model(std::ostream& os, const NeuralDynamics& model) {
  os << "nndm v1 " << model.state_dim() << ' ' << model.control_dim() << ' '
     << detail::fmt17(model.dt()) << ' ' << model.num_layers() << '\n';
  for (const Layer& l : model.layers()) {
    os << "layer " << l.rows() << ' ' << l.cols() << '\n';
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.cols(); ++c) os << (c ? " " : "") << detail::fmt17(l.weight(r, c));
      os << '\n';
    }
    for (Eigen::Index r = 0; r < l.rows(); ++r) os << (r ? " " : "") << detail::fmt17(l.bias[r]);
    os << '\n';
  }
}

inline NeuralDynamics read_model(std::istream& is) {
  std::string tag, version;
  if (!(is >> tag >> version) || tag != "nndm" || version != "v1") {
    throw FormatError("model file: missing 'nndm v1' header");
  }
  std::string tok;
  auto next = [&](const std::string& what) {
    if (!(is >> tok)) throw FormatError("model file: unexpected end of input reading " + what);
    return tok;
  };
  const long mx = detail::parse_int(next("m_x"), "m_x");
  const long mu = detail::parse_int(next("m_u"), "m_u");
  const double dt = detail::parse_double(next("dt"), "dt");
  const long n = detail::parse_int(next("n_layers"), "n_layers");
  if (mx <= 0 || mu < 0 || n <= 0) throw FormatError("model file: bad header dimensions");
  if (!std::isfinite(dt)) throw FormatError("model file: non-finite dt");
  std::vector<Layer> layers;
  long prev = mx + mu;
  for (long i = 0; i < n; ++i) {
    const std::string li = "layer " + std::to_string(i);
    if (next(li) != "layer") throw FormatError(li + ": expected 'layer' keyword");
    const long rows = detail::parse_int(next(li + " rows"), li + " rows");
    const long cols = detail::parse_int(next(li + " cols"), li + " cols");
    if (rows <= 0 || cols <= 0) throw FormatError(li + ": non-positive dimensions");
    if (cols != prev) {
      throw DimensionError(li + ": declares " + std::to_string(cols) +
                           " columns but previous layer outputs " + std::to_string(prev));
    }
    Layer l;
    l.weight.resize(rows, cols);
    l.bias.resize(rows);
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        const double v = detail::parse_double(next(li + " weight"), li + " weight");
        if (!std::isfinite(v)) throw FormatError(li + ": non-finite weight at (" + std::to_string(r) + "," + std::to_string(c) + ")");
        l.weight(r, c) = v;
      }
    for (long r = 0; r < rows; ++r) {
      const double v = detail::parse_double(next(li + " bias"), li + " bias");
      if (!std::isfinite(v)) throw FormatError(li + ": non-finite bias at " + std::to_string(r));
      l.bias[r] = v;
    }
    prev = rows;
    layers.push_back(std::move(l));
  }
  if (prev != mx) {
    throw DimensionError("output layer has " + std::to_string(prev) + " rows but m_x is " + std::to_string(mx));
  }
  return {std::move(layers), static_cast<int>(mx), static_cast<int>(mu), dt};
}

inline void save_model(const std::string& path, const NeuralDynamics& model) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_model(os, model);
}

inline NeuralDynamics load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open model file '" + path + "'");
  return read_model(is);
}

// Second-order unicycle: d/dt (px, py, v, theta) = (v cos theta, v sin theta, a, omega).
inline Vec unicycle_derivative(const Vec& x, const Vec& u) {
  Vec d(4);
  d << x[2] * std::cos(x[3]), x[2] * std::sin(x[3]), u[0], u[1];
  return d;
}

}  // namespace bond
