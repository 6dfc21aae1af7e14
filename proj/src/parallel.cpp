#include "dycaf/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace dycaf {

namespace {

int env_workers() {
  const char* v = std::getenv("DYCAF_THREADS");
  int n = 0;
  if (v != nullptr) n = std::atoi(v);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

std::atomic<int>& override_slot() {
  static std::atomic<int> v{0};
  return v;
}

}  // namespace

int max_workers() {
  int forced = override_slot().load(std::memory_order_relaxed);
  if (forced > 0) return forced;
  static const int from_env = env_workers();
  return from_env;
}

void set_max_workers(int n) {
  override_slot().store(n > 0 ? n : 0, std::memory_order_relaxed);
}

void parallel_for(i64 n, i64 grain, const std::function<void(i64, i64)>& fn) {
  if (n <= 0) return;
  const int workers = max_workers();
  if (workers <= 1 || n < 2 * std::max<i64>(1, grain)) {
    fn(0, n);
    return;
  }
  const i64 parts = std::min<i64>(workers, std::max<i64>(1, n / std::max<i64>(1, grain)));
  if (parts <= 1) {
    fn(0, n);
    return;
  }
  const i64 chunk = (n + parts - 1) / parts;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(parts - 1));
  for (i64 p = 1; p < parts; ++p) {
    const i64 b = p * chunk;
    const i64 e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace dycaf
