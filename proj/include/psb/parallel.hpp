// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace psb {

namespace detail {
inline std::atomic<int>& worker_count_storage() {
  static std::atomic<int> workers{1};
  return workers;
}
}  // namespace detail

/// Number of workers used by intra-op loops. Every output element is owned
/// by exactly one worker and reduced in a fixed order, so results do not
/// depend on this value.
inline int workers() { return detail::worker_count_storage().load(); }

inline void set_workers(int n) {
  detail::worker_count_storage().store(std::max(1, n));
}

inline unsigned hardware_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

/// RAII override of the worker count.
class WorkerScope {
 public:
  explicit WorkerScope(int n) : saved_(workers()) { set_workers(n); }
  ~WorkerScope() { set_workers(saved_); }
  WorkerScope(const WorkerScope&) = delete;
  WorkerScope& operator=(const WorkerScope&) = delete;

 private:
  int saved_;
};

/// Static-schedule parallel loop over [0, n). `work` is the approximate cost
/// of one iteration; tiny loops stay serial.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t work = 1) {
  const int w = workers();
#ifdef _OPENMP
  if (w > 1 && n > 1 && n * work >= 4096) {
    const long long count = static_cast<long long>(n);
    std::exception_ptr error;
#pragma omp parallel for schedule(static) num_threads(w)
    for (long long i = 0; i < count; ++i) {
      try {
        fn(static_cast<std::size_t>(i));
      } catch (...) {
#pragma omp critical(psb_parallel_error)
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace psb
