#include "deformpic/point_cloud.hpp"

#include <stdexcept>

namespace deformpic {

PointCloud::PointCloud(std::vector<float> xyz) : xyz_(std::move(xyz)) {
  if (xyz_.size() % 3 != 0) throw std::invalid_argument("PointCloud: coordinate count not divisible by 3");
}

PointCloud::PointCloud(const std::vector<Vec3>& points) {
  xyz_.reserve(points.size() * 3);
  for (const Vec3& p : points) xyz_.insert(xyz_.end(), p.begin(), p.end());
}

PointCloud PointCloud::select(std::span<const std::size_t> indices) const {
  std::vector<float> out;
  out.reserve(indices.size() * 3);
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("PointCloud::select: index out of range");
    out.insert(out.end(), xyz_.begin() + static_cast<std::ptrdiff_t>(3 * i),
               xyz_.begin() + static_cast<std::ptrdiff_t>(3 * i + 3));
  }
  return PointCloud(std::move(out));
}

}  // namespace deformpic
