#pragma once

#include <cstddef>

namespace kgalign {

// The one dot-product kernel behind similarity() and every index score, so
// batched and per-query scoring agree bit for bit.
inline double dot_f32(const float* a, const float* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace kgalign
