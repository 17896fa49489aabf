#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace paco {

// Static-chunked parallel loop. Callers only use this where iterations
// write to disjoint slots and read shared state, so the result does not
// depend on the schedule. threads <= 1 runs inline.
inline void parallel_for(size_t n, int threads,
                         const std::function<void(size_t, size_t)> &fn) {
  if (n == 0) return;
  size_t t = threads <= 1 ? 1 : static_cast<size_t>(threads);
  if (t > n) t = n;
  if (t == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  size_t chunk = (n + t - 1) / t;
  for (size_t i = 0; i < t; ++i) {
    size_t b = i * chunk;
    size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto &th : pool) th.join();
}

}  // namespace paco
