// Minimal fork-join helper for independent tasks.
#ifndef METAGRAD_PARALLEL_HPP
#define METAGRAD_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace metagrad {

/// Calls fn(k) for k in [0, count) on up to `workers` threads. Each task must
/// write only its own output slot. If tasks throw, the exception of the
/// lowest index is rethrown after all threads join.
template <typename Fn>
void parallel_for(std::size_t count, unsigned workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::atomic<std::size_t>& next) {
    for (std::size_t k = next++; k < count; k = next++) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  std::atomic<std::size_t> next{0};
  const unsigned threads =
      static_cast<unsigned>(std::min<std::size_t>(std::max(workers, 1u), count));
  if (threads <= 1) {
    run(next);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&] { run(next); });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace metagrad

#endif  // METAGRAD_PARALLEL_HPP
