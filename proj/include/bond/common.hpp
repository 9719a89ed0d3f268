#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iostream>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bond {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kPi = std::numbers::pi;

// Thrown for every contract violation (dimension mismatch, malformed file,
// bad configuration). The message always names the offending item.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Axis-aligned box, used for network input domains, state regions and the
// control set.
struct Box {
  Vec lower;
  Vec upper;

  Box() = default;
  Box(Vec lo, Vec hi) : lower(std::move(lo)), upper(std::move(hi)) {
    if (lower.size() != upper.size()) {
      throw DimensionError("box: lower has " + std::to_string(lower.size()) +
                           " entries, upper has " + std::to_string(upper.size()));
    }
    for (Eigen::Index i = 0; i < lower.size(); ++i) {
      if (!(lower[i] <= upper[i])) {
        throw Error("box: lower > upper at coordinate " + std::to_string(i));
      }
    }
  }

  Eigen::Index dim() const { return lower.size(); }
  Vec mid() const { return 0.5 * (lower + upper); }
  Vec width() const { return upper - lower; }

  bool contains(const Vec& p, double tol = 0.0) const {
    if (p.size() != dim()) return false;
    for (Eigen::Index i = 0; i < dim(); ++i) {
      if (p[i] < lower[i] - tol || p[i] > upper[i] + tol) return false;
    }
    return true;
  }
};

using InputBox = Box;

// Unicycle legal sets: state (px, py, v, theta), control (a, omega).
inline Box unicycle_state_box() {
  Vec lo(4), hi(4);
  lo << -10, -10, -2, -kPi;
  hi << 10, 10, 2, kPi;
  return {lo, hi};
}

inline Box unicycle_control_box() {
  Vec lo(2), hi(2);
  lo << -4, -kPi;
  hi << 4, kPi;
  return {lo, hi};
}

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

// Verbosity from BOND_LOG: 0 quiet (default), 1 info, 2 debug.
inline int log_level() {
  static const int level = [] {
    const char* env = std::getenv("BOND_LOG");
    if (env == nullptr) return 0;
    std::string s(env);
    if (s == "debug" || s == "2") return 2;
    if (s == "info" || s == "1") return 1;
    return 0;
  }();
  return level;
}

#define BOND_LOG_INFO(expr)                                      \
  do {                                                           \
    if (::bond::log_level() >= 1) std::cerr << "[bond] " << expr << '\n'; \
  } while (0)

#define BOND_LOG_DEBUG(expr)                                     \
  do {                                                           \
    if (::bond::log_level() >= 2) std::cerr << "[bond:debug] " << expr << '\n'; \
  } while (0)

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items must write
// to disjoint outputs; the first exception is rethrown.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace bond
