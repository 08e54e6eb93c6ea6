#include "deformpic/sample.hpp"

#include "deformpic/errors.hpp"

namespace deformpic {

std::string_view task_name(Task task) {
  switch (task) {
    case Task::reconstruction: return "reconstruction";
    case Task::denoising: return "denoising";
    case Task::registration: return "registration";
  }
  return "unknown";
}

std::string_view task_tag(Task task) {
  switch (task) {
    case Task::reconstruction: return "rec";
    case Task::denoising: return "den";
    case Task::registration: return "reg";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  for (Task t : kAllTasks) {
    if (name == task_name(t) || name == task_tag(t)) return t;
  }
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::string_view shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::torus: return "torus";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::cone: return "cone";
  }
  return "unknown";
}

ShapeKind parse_shape_kind(std::string_view name) {
  for (ShapeKind k : kAllShapeKinds) {
    if (name == shape_kind_name(k)) return k;
  }
  throw ConfigError("unknown shape kind '" + std::string(name) + "'");
}

}  // namespace deformpic
