#include "deformpic/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "deformpic/chamfer_kernel.hpp"
#include "deformpic/errors.hpp"

namespace deformpic::geometry {

namespace {

double squared_distance(const PointCloud& a, std::size_t i, const PointCloud& b, std::size_t j) {
  const auto pa = a.xyz().subspan(3 * i, 3);
  const auto pb = b.xyz().subspan(3 * j, 3);
  const double dx = static_cast<double>(pa[0]) - pb[0];
  const double dy = static_cast<double>(pa[1]) - pb[1];
  const double dz = static_cast<double>(pa[2]) - pb[2];
  return dx * dx + dy * dy + dz * dz;
}

std::size_t nearest_index(const PointCloud& cloud, const PointCloud& query, std::size_t q) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double d = squared_distance(query, q, cloud, i);
    if (d < best) {
      best = d;
      best_i = i;
    }
  }
  return best_i;
}

void require_non_empty(const PointCloud& c, const char* what) {
  if (c.empty()) throw std::invalid_argument(std::string(what) + ": empty point cloud");
}

}  // namespace

PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  require_non_empty(cloud, "normalize_unit_sphere");
  const std::size_t n = cloud.size();
  const auto xyz = cloud.xyz();
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) centroid[c] += xyz[3 * i + c];
  for (double& c : centroid) c /= static_cast<double>(n);

  std::vector<double> centered(3 * n);
  double max_norm = 0.0;
  double scale_ref = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double norm2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      centered[3 * i + c] = xyz[3 * i + c] - centroid[c];
      norm2 += centered[3 * i + c] * centered[3 * i + c];
      scale_ref = std::max(scale_ref, std::abs(static_cast<double>(xyz[3 * i + c])));
    }
    max_norm = std::max(max_norm, std::sqrt(norm2));
  }
  std::vector<float> out(3 * n, 0.0f);
  // Coincident points leave only rounding residue after centering.
  if (max_norm <= 1e-12 * std::max(1.0, scale_ref)) return PointCloud(std::move(out));
  for (std::size_t i = 0; i < 3 * n; ++i) out[i] = static_cast<float>(centered[i] / max_norm);
  return PointCloud(std::move(out));
}

std::vector<std::size_t> farthest_point_sampling(const PointCloud& cloud, std::size_t m, std::size_t seed_index) {
  const std::size_t n = cloud.size();
  if (m < 1 || m > n) {
    throw std::invalid_argument("farthest_point_sampling: m=" + std::to_string(m) + " outside [1, " + std::to_string(n) + "]");
  }
  if (seed_index >= n) throw std::invalid_argument("farthest_point_sampling: seed index out of range");
  std::vector<std::size_t> picked{seed_index};
  picked.reserve(m);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  taken[seed_index] = 1;
  std::size_t last = seed_index;
  while (picked.size() < m) {
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(cloud, i, cloud, last));
      if (!taken[i] && nearest[i] > best) {
        best = nearest[i];
        best_i = i;
      }
    }
    picked.push_back(best_i);
    taken[best_i] = 1;
    last = best_i;
  }
  return picked;
}

PatchedCloud knn_group(const PointCloud& cloud, const PointCloud& centers, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) throw std::invalid_argument("knn_group: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  PatchedCloud out;
  out.centers = centers;
  out.k = k;
  out.patches.reserve(centers.size() * k * 3);
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_distance(centers, c, cloud, i), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t j = 0; j < k; ++j) {
      const auto p = cloud.xyz().subspan(3 * dist[j].second, 3);
      out.patches.insert(out.patches.end(), p.begin(), p.end());
    }
  }
  return out;
}

std::vector<std::size_t> align_target_centers(Task task, const PointCloud& input, const PointCloud& target,
                                              const std::vector<std::size_t>& input_centers) {
  if (task != Task::reconstruction) {
    if (input.size() != target.size()) {
      throw std::invalid_argument("align_target_centers: corresponding clouds differ in size");
    }
    return input_centers;
  }
  std::vector<std::size_t> out;
  out.reserve(input_centers.size());
  for (std::size_t c : input_centers) out.push_back(nearest_index(target, input, c));
  return out;
}

namespace {

PatchedCloud patch_at(const PointCloud& cloud, std::vector<std::size_t> indices, std::size_t k) {
  PatchedCloud p = knn_group(cloud, cloud.select(indices), k);
  p.center_indices = std::move(indices);
  return p;
}

}  // namespace

JointPatches joint_sample(const InContextSample& sample, std::size_t m, std::size_t k, std::size_t seed_index) {
  JointPatches out;
  const auto prompt_centers = farthest_point_sampling(sample.prompt_input, m, seed_index);
  const auto query_centers = farthest_point_sampling(sample.query_input, m, seed_index);
  out.prompt_input = patch_at(sample.prompt_input, prompt_centers, k);
  out.query_input = patch_at(sample.query_input, query_centers, k);
  out.prompt_target = patch_at(sample.prompt_target,
                               align_target_centers(sample.task, sample.prompt_input, sample.prompt_target, prompt_centers), k);
  out.query_target = patch_at(sample.query_target,
                              align_target_centers(sample.task, sample.query_input, sample.query_target, query_centers), k);
  return out;
}

double chamfer_l2(const PointCloud& a, const PointCloud& b) {
  require_non_empty(a, "chamfer_l2");
  require_non_empty(b, "chamfer_l2");
  return detail::chamfer_match<float>(a.xyz(), b.xyz()).value;
}

Assignment solve_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw std::invalid_argument("solve_assignment: cost matrix is not n x n");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  auto a = [&](std::size_t i, std::size_t j) { return cost[(i - 1) * n + (j - 1)]; };
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.cost += cost[i * n + out.row_to_col[i]];
  out.row_potential.assign(u.begin() + 1, u.end());
  out.col_potential.assign(v.begin() + 1, v.end());
  return out;
}

double emd(const PointCloud& a, const PointCloud& b) {
  require_non_empty(a, "emd");
  if (a.size() != b.size()) {
    throw std::invalid_argument("emd: sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() > kEmdMaxPoints) {
    throw std::invalid_argument("emd: " + std::to_string(a.size()) + " points exceeds the exact-solver bound " +
                                std::to_string(kEmdMaxPoints));
  }
  const std::size_t n = a.size();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = std::sqrt(squared_distance(a, i, b, j));
  return solve_assignment(cost, n).cost / static_cast<double>(n);
}

FScore fscore(const PointCloud& pred, const PointCloud& gt, double tau) {
  require_non_empty(pred, "fscore");
  require_non_empty(gt, "fscore");
  if (!(tau > 0.0)) throw std::invalid_argument("fscore: tau must be positive");
  auto fraction_within = [tau](const PointCloud& from, const PointCloud& to) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < from.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < to.size(); ++j) best = std::min(best, squared_distance(from, i, to, j));
      if (std::sqrt(best) < tau) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(from.size());
  };
  FScore s;
  s.precision = fraction_within(pred, gt);
  s.recall = fraction_within(gt, pred);
  s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

Rotation rotation_from_angles(const std::array<double, 3>& angles_deg) {
  using M = std::array<std::array<double, 3>, 3>;
  const double deg = std::numbers::pi / 180.0;
  const double cx = std::cos(angles_deg[0] * deg), sx = std::sin(angles_deg[0] * deg);
  const double cy = std::cos(angles_deg[1] * deg), sy = std::sin(angles_deg[1] * deg);
  const double cz = std::cos(angles_deg[2] * deg), sz = std::sin(angles_deg[2] * deg);
  const M rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const M ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const M rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  auto mul = [](const M& a, const M& b) {
    M c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
  };
  return {angles_deg, mul(mul(rx, ry), rz)};
}

PointCloud rotate(const PointCloud& cloud, const Rotation& rotation) {
  const auto& r = rotation.matrix;
  std::vector<float> out(cloud.xyz().size());
  const auto in = cloud.xyz();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double x = in[3 * i], y = in[3 * i + 1], z = in[3 * i + 2];
    for (int c = 0; c < 3; ++c) out[3 * i + c] = static_cast<float>(r[c][0] * x + r[c][1] * y + r[c][2] * z);
  }
  return PointCloud(std::move(out));
}

std::pair<PointCloud, Rotation> random_rotation(const PointCloud& cloud, double max_angle_deg, Rng& rng) {
  if (!(max_angle_deg > 0.0 && max_angle_deg <= 180.0)) {
    throw std::invalid_argument("random_rotation: max angle must lie in (0, 180]");
  }
  std::array<double, 3> angles{};
  for (double& a : angles) a = rng.uniform(-max_angle_deg, max_angle_deg);
  Rotation r = rotation_from_angles(angles);
  return {rotate(cloud, r), r};
}

}  // namespace deformpic::geometry
