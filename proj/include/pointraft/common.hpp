#pragma once

// shared plumbing: error taxonomy, deterministic rng streams, slot-parallel map

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace pointraft {

// Keep freed multi-megabyte blocks in the heap instead of returning them to
// the kernel. The network allocates fresh activation buffers every forward
// pass; without this, glibc round-trips those pages through mmap/munmap and
// the refaults roughly double training time. Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__) && defined(M_MMAP_MAX)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

// bad inputs or files; the CLI maps these to exit code 2
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// numeric breakdowns (non-finite loss, degenerate geometry); exit code 3
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic rng with derived substreams. Every random choice in the
// library draws from a stream derived from one master seed via child(), so a
// run reproduces bit-for-bit regardless of evaluation order or worker count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(detail::splitmix64(seed)) {}

  // independent substream; ids are small caller-chosen constants
  Rng child(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t h = detail::splitmix64(seed_ ^ detail::splitmix64(a ^ 0x1234567800000001ULL));
    h = detail::splitmix64(h ^ detail::splitmix64(b ^ 0x9abcdef000000002ULL));
    h = detail::splitmix64(h ^ detail::splitmix64(c ^ 0x0f0f0f0f00000003ULL));
    return Rng(h);
  }

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform in (lo, hi) with endpoints excluded (strict |w| < bound at init)
  double uniform_open(double lo, double hi) {
    double u = (double(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

  // Box-Muller; fresh pair of draws per value keeps the stream layout simple
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 0.0;
    do { u1 = uniform01(); } while (u1 <= 0.0);
    const double u2 = uniform01();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(6.283185307179586477 * u2);
  }

  // uniform integer in [0, n); n >= 1 (modulo bias irrelevant at our scales)
  std::size_t index(std::size_t n) { return std::size_t(next_u64() % n); }

  bool bernoulli(double p) { return uniform01() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

// run fn(0..n-1) on `workers` threads; each index writes only its own slot,
// so results are identical for any worker count
template <class Fn>
inline void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int nt = int(std::min<std::size_t>(std::size_t(workers), n));
  pool.reserve(std::size_t(nt));
  for (int t = 0; t < nt; ++t) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace pointraft
