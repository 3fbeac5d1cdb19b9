#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace nrt {

/// Runs fn(begin..end) partitioned into contiguous chunks across `threads`
/// workers. fn(lo, hi) processes [lo, hi). With threads <= 1 runs inline.
/// Chunk boundaries depend only on (begin, end, threads), so any
/// per-chunk accumulation can be combined in chunk order deterministically.
inline void parallel_chunks(std::size_t begin, std::size_t end, int threads,
                            const std::function<void(std::size_t, std::size_t, int)>& fn) {
  const std::size_t n = end > begin ? end - begin : 0;
  if (n == 0) return;
  int workers = std::max(1, threads);
  workers = static_cast<int>(std::min<std::size_t>(workers, n));
  if (workers == 1) {
    fn(begin, end, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::size_t lo = begin + chunk * w;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi, w] { fn(lo, hi, w); });
  }
  for (auto& t : pool) t.join();
}

inline void parallel_for(std::size_t begin, std::size_t end, int threads,
                         const std::function<void(std::size_t)>& fn) {
  parallel_chunks(begin, end, threads, [&fn](std::size_t lo, std::size_t hi, int) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace nrt
