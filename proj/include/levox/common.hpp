#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace levox {

// Error hierarchy. The CLI maps these onto exit codes: invalid input / schema
// problems -> 2, filesystem and parsing problems -> 3, numerical failures -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class InsufficientCorrespondencesError : public InvalidInputError {
 public:
  using InvalidInputError::InvalidInputError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateConfigurationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateMixtureError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateFeatureError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace detail {
inline std::atomic<int>& max_threads_storage() {
  static std::atomic<int> value{static_cast<int>(std::thread::hardware_concurrency())};
  return value;
}
}  // namespace detail

inline int max_threads() {
  int n = detail::max_threads_storage().load();
  return n > 0 ? n : 1;
}

inline void set_max_threads(int n) {
  if (n < 1) throw InvalidInputError("set_max_threads: thread count must be >= 1");
  detail::max_threads_storage().store(n);
}

// Runs fn(chunk_index, begin, end) over [0, n) split into `chunk_count` nearly
// equal contiguous chunks. The decomposition depends only on n and chunk_count,
// never on the worker count, so reductions merged in chunk order are
// bitwise-identical no matter how many threads execute them.
template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t chunk_count, Fn&& fn) {
  if (n == 0) return;
  if (chunk_count == 0) chunk_count = 1;
  if (chunk_count > n) chunk_count = n;
  const std::size_t base = n / chunk_count;
  const std::size_t rem = n % chunk_count;
  auto chunk_range = [&](std::size_t c, std::size_t& begin, std::size_t& end) {
    begin = c * base + std::min(c, rem);
    end = begin + base + (c < rem ? 1 : 0);
  };

  const int workers = std::min<std::size_t>(max_threads(), chunk_count);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunk_count; ++c) {
      std::size_t begin, end;
      chunk_range(c, begin, end);
      fn(c, begin, end);
    }
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  auto worker = [&]() {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunk_count) return;
      std::size_t begin, end;
      chunk_range(c, begin, end);
      try {
        fn(c, begin, end);
      } catch (...) {
        bool expected = false;
        if (failed.compare_exchange_strong(expected, true)) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failed.load() && first_error) std::rethrow_exception(first_error);
}

inline std::size_t default_chunk_count(std::size_t n) {
  return std::min<std::size_t>(n, 256);
}

// Element-wise parallel loop; no reduction, so chunking only affects scheduling.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  parallel_chunks(n, default_chunk_count(n), [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
  });
}

// splitmix64: tiny, platform-stable generator. Used for all library-internal
// randomness so results are reproducible bit-for-bit across runs and machines.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x632be59bd9b4e019ULL * (stream + 1));
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // Warm up so nearby seeds decorrelate immediately.
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1): 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller; one value per call, no cached state.
  double normal() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  Rng fork(std::uint64_t stream) { return Rng(derive_seed(state_, stream)); }

 private:
  std::uint64_t state_;
};

}  // namespace levox
