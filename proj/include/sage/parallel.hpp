#pragma once

#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sage {

inline int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Work is always cut into the same number of contiguous chunks regardless of
// the thread count, so per-chunk partial results reduce in a fixed order and
// parallel runs are bit-identical to serial ones.
inline constexpr std::size_t kReductionChunks = 16;

struct ChunkRange {
  std::size_t begin;
  std::size_t end;
};

inline std::vector<ChunkRange> fixed_chunks(std::size_t n, std::size_t chunks = kReductionChunks) {
  std::vector<ChunkRange> out;
  if (n == 0) return out;
  if (chunks > n) chunks = n;
  out.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    out.push_back({n * c / chunks, n * (c + 1) / chunks});
  }
  return out;
}

// Runs fn(i) for i in [0, n). Iterations must be independent.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    fn(static_cast<std::size_t>(i));
  }
}

}  // namespace sage
