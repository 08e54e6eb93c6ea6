#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace deformpic::detail {

/// Nearest-neighbour matches and value of the Chamfer-L2 distance between two
/// xyz-interleaved point sets. Shared by the geometry metric and the
/// differentiable tensor op so both produce the same bits.
struct ChamferMatch {
  double value = 0.0;
  std::vector<std::size_t> a_to_b;  // nearest b for each a (lowest index on ties)
  std::vector<std::size_t> b_to_a;
};

template <typename T>
double directed_chamfer(std::span<const T> from, std::span<const T> to, std::vector<std::size_t>& nearest) {
  const std::size_t n_from = from.size() / 3;
  const std::size_t n_to = to.size() / 3;
  nearest.assign(n_from, 0);
  double total = 0.0;
  for (std::size_t i = 0; i < n_from; ++i) {
    const double px = from[3 * i], py = from[3 * i + 1], pz = from[3 * i + 2];
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < n_to; ++j) {
      const double dx = px - static_cast<double>(to[3 * j]);
      const double dy = py - static_cast<double>(to[3 * j + 1]);
      const double dz = pz - static_cast<double>(to[3 * j + 2]);
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    nearest[i] = best_j;
    total += best;
  }
  return total / static_cast<double>(n_from);
}

template <typename T>
ChamferMatch chamfer_match(std::span<const T> a, std::span<const T> b) {
  ChamferMatch m;
  const double ab = directed_chamfer(a, b, m.a_to_b);
  const double ba = directed_chamfer(b, a, m.b_to_a);
  m.value = ab + ba;
  return m;
}

}  // namespace deformpic::detail
