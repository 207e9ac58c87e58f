#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace ddissect {

// Process-wide worker count for the per-sample loops (dissection, evaluation,
// dataset generation). Results are always merged in index order, so the value
// changes wall time only, never output bits.
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_threads(int n) { thread_count().store(n < 1 ? 1 : n); }
inline int get_threads() { return thread_count().load(); }

// Runs fn(i) for i in [0, n). Work items must be independent; exceptions from
// workers are rethrown on the calling thread.
template <class F>
void parallel_for(int n, F&& fn) {
  const int workers = std::min(get_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  auto body = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) pool.emplace_back(body);
  for (auto& th : pool) th.join();
  if (failed.load() && err) std::rethrow_exception(err);
}

}  // namespace ddissect
