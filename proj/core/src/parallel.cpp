#include "dcv/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace dcv {

namespace {

int default_threads() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

std::atomic<int> g_threads{default_threads()};

}  // namespace

void set_num_threads(int threads) { g_threads.store(threads < 1 ? default_threads() : threads); }

int num_threads() { return g_threads.load(); }

std::size_t chunk_count(std::size_t n) {
  const auto workers = static_cast<std::size_t>(std::max(1, num_threads()));
  return std::max<std::size_t>(1, std::min(workers, n));
}

}  // namespace dcv
