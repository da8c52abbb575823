#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace pcbmerge::detail {

inline constexpr std::size_t kChunk = std::size_t{1} << 15;

inline std::size_t chunk_count(std::size_t total) { return (total + kChunk - 1) / kChunk; }

// Runs fn(chunk_index, begin, end) for every kChunk-sized slice of [0, total).
// Chunk boundaries do not depend on the thread count, so per-chunk partial
// results reduced in chunk order are schedule independent.
template <typename Fn>
void for_each_chunk(std::size_t total, Fn&& fn) {
  const std::size_t chunks = chunk_count(total);
  const std::size_t workers =
      std::min<std::size_t>(chunks, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c, c * kChunk, std::min(total, (c + 1) * kChunk));
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) {
          fn(c, c * kChunk, std::min(total, (c + 1) * kChunk));
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace pcbmerge::detail
