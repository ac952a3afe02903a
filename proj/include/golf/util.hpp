#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace golf {

// Compensated accumulator; keeps long quadratic-form sums accurate for large n.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double y = v - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  double value() const { return sum; }
};

inline double squared_frobenius(const Eigen::MatrixXd& m) {
  KahanSum s;
  const double* p = m.data();
  const Eigen::Index n = m.size();
  for (Eigen::Index i = 0; i < n; ++i) s.add(p[i] * p[i]);
  return s.value();
}

// Global worker count for parallel_for. 1 = serial (default), 0 = hardware.
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_num_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  thread_count().store(std::max(1, n));
}

inline int get_num_threads() { return thread_count().load(); }

// Runs fn(i) for i in [0, n). Iteration order inside a worker is ascending;
// fn must not depend on cross-iteration state.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  const int workers = std::min<std::int64_t>(get_num_threads(), n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  std::mutex err_mtx;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::scoped_lock lk(err_mtx);
          if (!failed.exchange(true)) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failed.load()) std::rethrow_exception(err);
}

}  // namespace golf
