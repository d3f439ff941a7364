#pragma once

/// \file parallel.hpp
/// \brief Minimal fork-join loop over independent index ranges.

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace tempo_kkt {

/// \brief Worker count: TEMPO_KKT_THREADS if set and positive, else the hardware concurrency.
inline std::size_t default_thread_count() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TEMPO_KKT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return hw;
}

/// \brief Runs body(i) for i in [0, n) split into contiguous chunks over `threads` workers.
/// Each index must touch only state owned by that index.
template <class Body>
void parallel_for(std::size_t n, Body&& body, std::size_t threads = 0) {
  if (threads == 0) threads = default_thread_count();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex guard;
  auto run = [&](std::size_t lo, std::size_t hi) {
    try {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    } catch (...) {
      std::lock_guard lock(guard);
      if (!failure) failure = std::current_exception();
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 1; t < threads; ++t) {
      const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
      if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(n, chunk));
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace tempo_kkt
