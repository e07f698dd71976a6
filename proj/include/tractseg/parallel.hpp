#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace tractseg {

/// Worker cap for data-parallel loops. 1 means run inline on the caller.
struct Exec {
  unsigned threads = 1;
};

/// Splits [begin, end) into at most `exec.threads` contiguous chunks and calls
/// fn(chunk_begin, chunk_end) for each. Chunk boundaries depend only on the
/// range and thread count, so per-element results are identical to a serial run
/// as long as fn writes disjoint outputs.
template <typename Fn>
void parallel_for(std::size_t begin, std::size_t end, Exec exec, Fn&& fn) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers =
      std::min<std::size_t>(std::max(1u, exec.threads), n);
  if (workers == 1) {
    fn(begin, end);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = begin + n * w / workers;
    const std::size_t hi = begin + n * (w + 1) / workers;
    pool.emplace_back([&, w, lo, hi] {
      try {
        fn(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace tractseg
