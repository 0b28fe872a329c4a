// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace rr {

namespace detail {
inline std::atomic<unsigned> g_max_threads{1};
}

/// Upper bound on worker threads used by search, mining and batch gradients.
/// Results never depend on this value: work is split into independent
/// per-index tasks and every reduction runs sequentially in index order.
inline void set_max_threads(unsigned n) { detail::g_max_threads.store(std::max(1u, n)); }
inline unsigned max_threads() { return detail::g_max_threads.load(); }

/// Reads RR_THREADS; returns 0 when unset or unparsable.
inline unsigned threads_from_env() {
  const char* s = std::getenv("RR_THREADS");
  if (!s || !*s) return 0;
  try {
    long v = std::stol(s);
    return v > 0 ? static_cast<unsigned>(v) : 0;
  } catch (...) {
    return 0;
  }
}

/// Calls fn(i) for i in [0, n), contiguous chunks per thread.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_per_thread = 64) {
  const std::size_t workers =
      std::min<std::size_t>(max_threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_thread)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
      pool.emplace_back([&, lo, hi, w] {
        try {
          for (std::size_t i = lo; i < hi; ++i) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace rr
