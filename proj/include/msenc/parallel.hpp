#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include "msenc/tensor.hpp"

namespace msenc {

// Contiguous half-open range [begin, end).
struct Range {
  Index begin = 0;
  Index end = 0;
  Index size() const { return end - begin; }
};

// Splits [0, n) into at most `parts` contiguous ranges of near-equal size.
// The partition depends only on (n, parts), which keeps chunked reductions
// reproducible for a fixed thread count.
inline std::vector<Range> partition(Index n, int parts) {
  std::vector<Range> out;
  parts = std::max(1, std::min<int>(parts, static_cast<int>(std::max<Index>(n, 1))));
  const Index base = n / parts;
  const Index extra = n % parts;
  Index begin = 0;
  for (int i = 0; i < parts; ++i) {
    const Index len = base + (i < extra ? 1 : 0);
    out.push_back({begin, begin + len});
    begin += len;
  }
  return out;
}

// Runs fn(chunk_index, range) for each chunk. With threads <= 1 everything
// runs inline on the caller's thread.
inline void parallel_chunks(const std::vector<Range>& chunks, int threads,
                            const std::function<void(std::size_t, Range)>& fn) {
  if (threads <= 1 || chunks.size() <= 1) {
    for (std::size_t i = 0; i < chunks.size(); ++i) fn(i, chunks[i]);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(chunks.size());
  workers.reserve(chunks.size() - 1);
  for (std::size_t i = 1; i < chunks.size(); ++i) {
    workers.emplace_back([&, i] {
      try {
        fn(i, chunks[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  try {
    fn(0, chunks[0]);
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace msenc
