#pragma once

#include <cstddef>

namespace efn {

/// Execution mode for data-parallel loops. The serial path is the reference:
/// every parallel loop writes slot i from iteration i only and reductions
/// happen afterwards in index order, so both modes produce bit-identical
/// results.
enum class ExecMode { kSerial, kOpenMP };

/// Run body(0..n-1). With kOpenMP the iterations are distributed over
/// threads; bodies must only touch their own slot.
template <typename Body>
void parallel_for(std::size_t n, ExecMode mode, const Body& body) {
  if (mode == ExecMode::kOpenMP && n > 1) {
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(n); ++i)
      body(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) body(i);
  }
}

}  // namespace efn
