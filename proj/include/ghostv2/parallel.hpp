#pragma once

#include <cstdint>
#include <string>

namespace ghostv2 {

// Worker count used by parallel_for. Defaults to the hardware concurrency.
void set_num_threads(int n);
int num_threads();

struct ThreadChoice {
  int threads = 1;
  std::string source;  // "flag", "env" or "default"
};

// Applies the requested worker count (0 = hardware default). A positive
// GHOSTV2_NUM_THREADS environment variable takes precedence.
ThreadChoice configure_threads(int requested);

// Static partition of [begin, end). Each index is processed by exactly one
// worker, so results never depend on the worker count as long as the body
// writes only to index-owned outputs.
template <typename Body>
void parallel_for(std::int64_t begin, std::int64_t end, Body&& body) {
#if defined(_OPENMP)
  const int threads = num_threads();
  if (threads > 1 && end - begin > 1) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::int64_t i = begin; i < end; ++i) body(i);
    return;
  }
#endif
  for (std::int64_t i = begin; i < end; ++i) body(i);
}

}  // namespace ghostv2
