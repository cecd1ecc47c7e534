#pragma once

// Deterministic parallel reduction: the input range is cut into chunks whose
// boundaries do not depend on the worker count, each chunk is reduced
// independently, and chunk results are merged by a fixed pairwise tree.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

namespace srnn {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child seed number `k` of a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t k) {
  return splitmix64(splitmix64(master) ^ (k * 0xD1B54A32D192ED03ULL + 1));
}

using Rng = std::mt19937_64;

inline int default_workers() {
  if (const char* env = std::getenv("SPECTRAL_RNN_WORKERS")) {
    int w = std::atoi(env);
    if (w > 0) return w;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (n == 0) return;
  const std::size_t w = std::min<std::size_t>(std::max(workers, 1), n);
  if (w == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          next.store(n);
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

template <class T, class Combine>
T tree_reduce(std::vector<T> parts, Combine&& combine) {
  while (parts.size() > 1) {
    std::vector<T> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2)
      next.push_back(combine(std::move(parts[i]), std::move(parts[i + 1])));
    if (parts.size() % 2) next.push_back(std::move(parts.back()));
    parts.swap(next);
  }
  return std::move(parts.front());
}

// Reduces fn(begin, end) over [0, n) in chunks of `chunk` items.
template <class T, class Fn, class Combine>
T chunked_reduce(std::size_t n, std::size_t chunk, int workers, Fn&& fn,
                 Combine&& combine) {
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t nchunks = std::max<std::size_t>((n + chunk - 1) / chunk, 1);
  std::vector<T> parts(nchunks);
  parallel_for(nchunks, workers, [&](std::size_t c) {
    const std::size_t b = c * chunk;
    const std::size_t e = std::min(n, b + chunk);
    parts[c] = fn(b, e);
  });
  return tree_reduce(std::move(parts), combine);
}

}  // namespace srnn
