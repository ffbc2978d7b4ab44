#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ntkmeta {

/// Evaluates fn(i) for i in [0, n) on up to `workers` threads and returns the
/// results in index order. The first exception thrown (lowest index) is
/// rethrown after all workers finish.
template <class Fn>
auto parallel_map(std::size_t n, std::size_t workers, Fn&& fn) {
  using Result = decltype(fn(std::size_t{0}));
  std::vector<Result> out(n);
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ntkmeta
