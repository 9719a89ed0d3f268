#pragma once

#include "bond/nndm.hpp"

#include <algorithm>
#include <numeric>

namespace bond {

struct TrainConfig {
  std::vector<int> sizes{6, 32, 4};
  int dataset_size = 100000;
  int epochs = 150;
  int batch = 256;
  double learning_rate = 3e-3;
  double final_learning_rate = 1e-4;
  double dt = 0.1;
  std::uint64_t seed = 1;
};

struct TrainResult {
  NeuralDynamics model;
  double rmse = 0.0;          // held-out grid RMSE over all outputs
  double final_loss = 0.0;    // last-epoch mean MSE in normalized units
  bool loss_warning = false;  // loss did not decrease after warmup
  std::vector<double> epoch_loss;
};

// Held-out evaluation grid: 10 values each of (v, theta, a, omega); the
// positions, which the target ignores, cycle through a fixed pattern.
inline std::pair<Mat, Mat> unicycle_eval_grid() {
  const Box xs = unicycle_state_box();
  const Box us = unicycle_control_box();
  const int n = 10;
  Mat in(6, n * n * n * n), out(4, n * n * n * n);
  auto lin = [n](double lo, double hi, int i) { return lo + (hi - lo) * (i + 0.5) / n; };
  int col = 0;
  for (int iv = 0; iv < n; ++iv)
    for (int it = 0; it < n; ++it)
      for (int ia = 0; ia < n; ++ia)
        for (int iw = 0; iw < n; ++iw, ++col) {
          Vec x(4), u(2);
          x << lin(xs.lower[0], xs.upper[0], (col * 7) % n), lin(xs.lower[1], xs.upper[1], (col * 3) % n),
              lin(xs.lower[2], xs.upper[2], iv), lin(xs.lower[3], xs.upper[3], it);
          u << lin(us.lower[0], us.upper[0], ia), lin(us.lower[1], us.upper[1], iw);
          in.col(col) << x, u;
          out.col(col) = unicycle_derivative(x, u);
        }
  return {in, out};
}

inline double rmse_on(const NeuralDynamics& model, const Mat& in, const Mat& out) {
  double se = 0.0;
  for (Eigen::Index c = 0; c < in.cols(); ++c) se += (model.forward_input(in.col(c)) - out.col(c)).squaredNorm();
  return std::sqrt(se / static_cast<double>(in.cols() * out.rows()));
}

// Minibatch Adam on MSE against the analytic unicycle derivative, with
// samples drawn uniformly from the legal state/control boxes. Inputs and
// targets are standardized during training and the affine maps are folded
// back into the first and last layers afterwards.
inline TrainResult train_on_unicycle(const TrainConfig& cfg) {
  const auto& sizes = cfg.sizes;
  if (sizes.size() < 2 || sizes.front() != 6 || sizes.back() != 4) {
    throw DimensionError("unicycle model must map 6 inputs to 4 outputs");
  }
  std::mt19937_64 rng(cfg.seed);
  const Box xs = unicycle_state_box();
  const Box us = unicycle_control_box();
  Vec lo(6), hi(6);
  lo << xs.lower, us.lower;
  hi << xs.upper, us.upper;
  const Box in_box(lo, hi);

  const int n = cfg.dataset_size;
  Mat data(6, n), target(4, n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < 6; ++d) data(d, i) = in_box.lower[d] + uni(rng) * in_box.width()[d];
    target.col(i) = unicycle_derivative(data.col(i).head(4), data.col(i).tail(2));
  }
  const Vec in_mean = in_box.mid();
  const Vec in_scale = 0.5 * in_box.width() / std::sqrt(3.0);  // std of a uniform
  const Vec out_mean = target.rowwise().mean();
  Vec out_scale = ((target.colwise() - out_mean).array().square().rowwise().mean()).sqrt().matrix();
  out_scale = out_scale.cwiseMax(1e-6);
  const Mat xn = (data.colwise() - in_mean).array().colwise() / in_scale.array();
  const Mat yn = (target.colwise() - out_mean).array().colwise() / out_scale.array();

  NeuralDynamics init = random_network(sizes, 4, cfg.dt, rng());
  std::vector<Mat> W;
  std::vector<Vec> b;
  for (const Layer& l : init.layers()) {
    W.push_back(l.weight);
    b.push_back(l.bias * 0.0);
  }
  const std::size_t L = W.size();
  std::vector<Mat> mW(L), vW(L);
  std::vector<Vec> mb(L), vb(L);
  for (std::size_t i = 0; i < L; ++i) {
    mW[i] = Mat::Zero(W[i].rows(), W[i].cols());
    vW[i] = mW[i];
    mb[i] = Vec::Zero(b[i].size());
    vb[i] = mb[i];
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  const long total_steps = static_cast<long>(cfg.epochs) * ((n + cfg.batch - 1) / cfg.batch);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  TrainResult res;
  std::vector<Mat> acts(L + 1), pre(L);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_se = 0.0;
    for (int start = 0; start < n; start += cfg.batch) {
      const int m = std::min(cfg.batch, n - start);
      Mat xb(6, m), yb(4, m);
      for (int j = 0; j < m; ++j) {
        xb.col(j) = xn.col(order[start + j]);
        yb.col(j) = yn.col(order[start + j]);
      }
      acts[0] = xb;
      for (std::size_t i = 0; i < L; ++i) {
        pre[i] = (W[i] * acts[i]).colwise() + b[i];
        acts[i + 1] = (i + 1 < L) ? Mat(pre[i].cwiseMax(0.0)) : pre[i];
      }
      Mat delta = (acts[L] - yb) * (2.0 / (m * 4.0));
      epoch_se += (acts[L] - yb).squaredNorm();
      ++step;
      const double frac = static_cast<double>(step) / std::max<long>(1, total_steps);
      const double lr = cfg.final_learning_rate +
                        0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + std::cos(kPi * frac));
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t ii = L; ii-- > 0;) {
        const Mat gW = delta * acts[ii].transpose();
        const Vec gb = delta.rowwise().sum();
        if (ii > 0) {
          delta = (W[ii].transpose() * delta).cwiseProduct((pre[ii - 1].array() > 0.0).cast<double>().matrix());
        }
        mW[ii] = beta1 * mW[ii] + (1 - beta1) * gW;
        vW[ii] = beta2 * vW[ii] + (1 - beta2) * gW.cwiseAbs2();
        mb[ii] = beta1 * mb[ii] + (1 - beta1) * gb;
        vb[ii] = beta2 * vb[ii] + (1 - beta2) * gb.cwiseAbs2();
        W[ii].array() -= lr * (mW[ii].array() / c1) / ((vW[ii].array() / c2).sqrt() + eps);
        b[ii].array() -= lr * (mb[ii].array() / c1) / ((vb[ii].array() / c2).sqrt() + eps);
      }
    }
    res.epoch_loss.push_back(epoch_se / (static_cast<double>(n) * 4.0));
  }

  // Fold the normalization into the first and last layers.
  std::vector<Layer> layers(L);
  for (std::size_t i = 0; i < L; ++i) layers[i] = {W[i], b[i]};
  const Vec inv = in_scale.cwiseInverse();
  layers[0].bias = layers[0].bias - layers[0].weight * inv.cwiseProduct(in_mean);
  layers[0].weight = layers[0].weight * inv.asDiagonal();
  layers[L - 1].weight = out_scale.asDiagonal() * layers[L - 1].weight;
  layers[L - 1].bias = out_scale.cwiseProduct(layers[L - 1].bias) + out_mean;

  res.model = NeuralDynamics(std::move(layers), 4, 2, cfg.dt);
  const auto [gin, gout] = unicycle_eval_grid();
  res.rmse = rmse_on(res.model, gin, gout);
  res.final_loss = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
  const std::size_t warmup = std::min<std::size_t>(3, res.epoch_loss.size());
  if (res.epoch_loss.size() > warmup && warmup > 0 && res.epoch_loss.back() >= res.epoch_loss[warmup - 1]) {
    res.loss_warning = true;
  }
  return res;
}

}  // namespace bond
