#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace cvil {

inline unsigned worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Splits [begin, end) into contiguous chunks and runs fn(lo, hi) on each,
// one chunk per hardware thread. Runs inline when a single worker suffices.
template <typename Fn>
void parallel_for_chunks(std::size_t begin, std::size_t end, Fn&& fn,
                         std::size_t min_chunk = 256) {
  if (end <= begin) return;
  const std::size_t total = end - begin;
  const std::size_t workers =
      std::min<std::size_t>(worker_count(), (total + min_chunk - 1) / min_chunk);
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  const std::size_t step = (total + workers - 1) / workers;
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = begin + w * step;
    const std::size_t hi = std::min(end, lo + step);
    if (lo >= hi) break;
    threads.emplace_back([&, w, lo, hi] {
      try {
        fn(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace cvil
