#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "deformpic/point_cloud.hpp"

namespace deformpic {

enum class Task : std::uint8_t { reconstruction = 0, denoising = 1, registration = 2 };

inline constexpr std::array<Task, 3> kAllTasks = {Task::reconstruction, Task::denoising, Task::registration};
inline constexpr int kLevels = 5;

std::string_view task_name(Task task);
/// Short column tag: rec / den / reg.
std::string_view task_tag(Task task);
Task parse_task(std::string_view name);

enum class ShapeKind : std::uint8_t { sphere = 0, cube = 1, torus = 2, cylinder = 3, cone = 4 };

inline constexpr std::array<ShapeKind, 5> kAllShapeKinds = {ShapeKind::sphere, ShapeKind::cube, ShapeKind::torus,
                                                           ShapeKind::cylinder, ShapeKind::cone};

std::string_view shape_kind_name(ShapeKind kind);
ShapeKind parse_shape_kind(std::string_view name);

/// Procedural shape description. Parameter meaning per kind:
///   sphere:   {radius}
///   cube:     {half_x, half_y, half_z}
///   torus:    {major_radius, minor_radius}
///   cylinder: {radius, half_height}
///   cone:     {base_radius, height}
struct ShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  std::vector<double> params;
  int n_points = 1024;
  std::uint64_t seed = 0;

  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

/// How one (input, target) pair was derived from its clean cloud.
struct PairProvenance {
  std::uint64_t pair_seed = 0;
  /// Number of target points altered: input size (reconstruction), replaced
  /// points (denoising), or all points (registration).
  std::size_t changed = 0;
  /// Registration only: per-axis angles in degrees (x, y, z).
  std::array<double, 3> rotation_deg{0.0, 0.0, 0.0};

  friend bool operator==(const PairProvenance&, const PairProvenance&) = default;
};

struct Provenance {
  ShapeSpec prompt_shape;
  ShapeSpec query_shape;
  PairProvenance prompt_pair;
  PairProvenance query_pair;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// One in-context example: a demonstration pair and a query pair of the same task.
struct InContextSample {
  Task task = Task::reconstruction;
  int level = 1;
  PointCloud prompt_input;
  PointCloud prompt_target;
  PointCloud query_input;
  PointCloud query_target;
  Provenance provenance;

  friend bool operator==(const InContextSample&, const InContextSample&) = default;
};

}  // namespace deformpic
