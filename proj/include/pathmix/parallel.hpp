#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace pathmix {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(begin, end, chunk_index) over fixed-size chunks of [0, n_items).
// The chunk grid does not depend on the worker count, so reductions that
// combine per-chunk partials in chunk order are bit-identical for any
// number of threads.
inline void parallel_chunks(int n_items, int chunk_size, int threads,
                            const std::function<void(int, int, int)>& fn) {
  if (n_items <= 0) return;
  const int n_chunks = (n_items + chunk_size - 1) / chunk_size;
  threads = std::min(resolve_threads(threads), n_chunks);
  if (threads <= 1) {
    for (int c = 0; c < n_chunks; ++c)
      fn(c * chunk_size, std::min(n_items, (c + 1) * chunk_size), c);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    try {
      for (;;) {
        const int c = next.fetch_add(1);
        if (c >= n_chunks || failed.load()) return;
        fn(c * chunk_size, std::min(n_items, (c + 1) * chunk_size), c);
      }
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace pathmix
