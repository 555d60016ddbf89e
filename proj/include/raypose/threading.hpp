#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace raypose {

// Block-partitioned parallel loop. Work item i always lands in block
// i * threads / n, so outputs written to per-index slots are identical for
// any thread count; reductions over the slots must then happen in index
// order to stay deterministic.
template <typename Fn>
void parallel_for(int64_t n, int threads, Fn&& fn) {
  threads = std::max(1, std::min<int64_t>(threads, n));
  if (threads == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int t = 0; t < threads; ++t) {
    const int64_t begin = n * t / threads;
    const int64_t end = n * (t + 1) / threads;
    pool.emplace_back([&, begin, end] {
      try {
        for (int64_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace raypose
