#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "kgalign/embedder.hpp"
#include "kgalign/rng.hpp"

namespace kgalign::bench {

// Rows are unit length so dot products behave like cosine scores.
inline DenseMatrix unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  DenseMatrix m(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (auto& x : m.row(i)) {
      x = static_cast<float>(rng.normal());
      norm += static_cast<double>(x) * x;
    }
    const auto inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (auto& x : m.row(i)) x *= inv;
  }
  return m;
}

inline std::vector<EntityId> ids_for(std::size_t n, const char* prefix) {
  std::vector<EntityId> ids;
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(fmt::format("{}{:06}", prefix, i));
  return ids;
}

}  // namespace kgalign::bench
