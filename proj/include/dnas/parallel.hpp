#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dnas {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}
}  // namespace detail

/// Upper bound on worker threads used inside op kernels.
inline int num_threads() { return detail::thread_cap().load(); }

inline void set_num_threads(int n) { detail::thread_cap().store(std::max(1, n)); }

/// Reads DNAS_THREADS; falls back to `fallback` when unset or malformed.
inline int threads_from_env(int fallback) {
  const char* raw = std::getenv("DNAS_THREADS");
  if (raw == nullptr || *raw == '\0') return std::max(1, fallback);
  char* end = nullptr;
  long v = std::strtol(raw, &end, 10);
  if (end == raw || v < 1) return std::max(1, fallback);
  return static_cast<int>(std::min<long>(v, 256));
}

/// Keeps large activation buffers on the heap instead of mapping fresh pages
/// for every op result. Call once at program start; no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // the largest value glibc accepts
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Runs fn(i) for i in [begin, end). Each index is visited exactly once; the
/// caller is responsible for making iterations write disjoint memory. Results
/// never depend on the thread count as long as that holds.
template <typename Fn>
void parallel_for(int64_t begin, int64_t end, Fn&& fn) {
  const int64_t count = end - begin;
  if (count <= 0) return;
  const int threads = static_cast<int>(std::min<int64_t>(num_threads(), count));
  if (threads <= 1) {
    for (int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{begin};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    try {
      for (int64_t i = next.fetch_add(1); i < end; i = next.fetch_add(1)) fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mu);
      if (!failure) failure = std::current_exception();
      next.store(end);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace dnas
