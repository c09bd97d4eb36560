#pragma once

// Deterministic fork-join helper: a static block partition over [0, n).
// Callers own all randomness (per-index substreams) and write disjoint
// slots, so results never depend on the worker count.

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace tvc {

inline int effective_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

template <typename Fn>
void parallel_for(Eigen::Index n, int threads, Fn&& fn) {
  threads = std::min<Eigen::Index>(effective_threads(threads), std::max<Eigen::Index>(n, 1));
  if (threads <= 1 || n <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads - 1));
  std::exception_ptr first_error;
  std::mutex err_mutex;

  auto run_block = [&](Eigen::Index begin, Eigen::Index end) {
    try {
      for (Eigen::Index i = begin; i < end; ++i) fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  const Eigen::Index chunk = (n + threads - 1) / threads;
  for (int t = 1; t < threads; ++t) {
    const Eigen::Index b = chunk * t;
    if (b >= n) break;
    pool.emplace_back(run_block, b, std::min(n, b + chunk));
  }
  run_block(0, std::min(n, chunk));
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace tvc
