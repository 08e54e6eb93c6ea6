#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "deformpic/point_cloud.hpp"
#include "deformpic/rng.hpp"
#include "deformpic/sample.hpp"

namespace deformpic::geometry {

/// Centers plus fixed-size neighbourhoods (absolute coordinates).
struct PatchedCloud {
  PointCloud centers;
  std::vector<std::size_t> center_indices;
  std::vector<float> patches;  // M x k x 3, row-major
  std::size_t k = 0;

  std::size_t count() const { return center_indices.size(); }
  /// Patches flattened to an (M*k)-point cloud.
  PointCloud flattened() const { return PointCloud(patches); }

  friend bool operator==(const PatchedCloud&, const PatchedCloud&) = default;
};

struct JointPatches {
  PatchedCloud prompt_input;
  PatchedCloud prompt_target;
  PatchedCloud query_input;
  PatchedCloud query_target;
};

/// Translates the centroid to the origin and scales the furthest point to norm 1.
/// A cloud whose points all coincide maps to all zeros.
PointCloud normalize_unit_sphere(const PointCloud& cloud);

/// Greedy max-min subset, starting at `seed_index`; ties go to the lowest index.
std::vector<std::size_t> farthest_point_sampling(const PointCloud& cloud, std::size_t m, std::size_t seed_index = 0);

/// k nearest cloud points to each center, sorted by distance (ties: lowest index).
PatchedCloud knn_group(const PointCloud& cloud, const PointCloud& centers, std::size_t k);

/// Input-to-target aligned patching of all four clouds of a sample.
///
/// FPS runs on each input cloud. Where input point i corresponds to target
/// point i (denoising, registration) the targets reuse the same indices;
/// otherwise each input center maps to its nearest target point.
JointPatches joint_sample(const InContextSample& sample, std::size_t m, std::size_t k, std::size_t seed_index = 0);

/// Aligned center indices into `target` for the given input centers.
std::vector<std::size_t> align_target_centers(Task task, const PointCloud& input, const PointCloud& target,
                                              const std::vector<std::size_t>& input_centers);

/// Symmetric mean squared nearest-neighbour distance.
double chamfer_l2(const PointCloud& a, const PointCloud& b);

/// Optimal assignment of an n x n cost matrix with the dual certificate.
struct Assignment {
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;
  std::vector<double> row_potential;
  std::vector<double> col_potential;
};

/// Exact minimum-cost perfect matching (Hungarian method, O(n^3)).
Assignment solve_assignment(const std::vector<double>& cost, std::size_t n);

inline constexpr std::size_t kEmdMaxPoints = 512;

/// Mean Euclidean transport cost under the optimal bijection; |a| == |b| <= 512.
double emd(const PointCloud& a, const PointCloud& b);

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

/// Precision/recall of points within Euclidean distance tau of the other set.
FScore fscore(const PointCloud& pred, const PointCloud& gt, double tau);

struct Rotation {
  std::array<double, 3> angles_deg{0.0, 0.0, 0.0};
  std::array<std::array<double, 3>, 3> matrix{};
};

/// R = Rx(ax) * Ry(ay) * Rz(az): intrinsic X, then Y, then Z.
Rotation rotation_from_angles(const std::array<double, 3>& angles_deg);

PointCloud rotate(const PointCloud& cloud, const Rotation& rotation);

/// Rotates by independent per-axis angles drawn uniformly from [-max, +max].
std::pair<PointCloud, Rotation> random_rotation(const PointCloud& cloud, double max_angle_deg, Rng& rng);

}  // namespace deformpic::geometry
