#pragma once

#include <cstddef>

namespace dcv {

/// Number of worker threads used by data-parallel kernels. Work is split into
/// static contiguous chunks, so a fixed thread count gives bit-identical
/// results across runs.
void set_num_threads(int threads);
int num_threads();

/// Number of chunks parallel_chunks(n, ...) will use.
std::size_t chunk_count(std::size_t n);

/// Calls fn(chunk, begin, end) on disjoint contiguous subranges of [0, n),
/// chunk in [0, chunk_count(n)). Chunk boundaries depend only on n and
/// num_threads().
template <typename Fn>
void parallel_chunks(std::size_t n, Fn&& fn);

}  // namespace dcv

#include "dcv/detail/parallel_impl.hpp"
