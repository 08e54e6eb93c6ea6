#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace deformpic {

using Vec3 = std::array<float, 3>;

/// Ordered N x 3 point set stored as interleaved xyz floats.
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(std::vector<float> xyz);
  explicit PointCloud(const std::vector<Vec3>& points);

  std::size_t size() const { return xyz_.size() / 3; }
  bool empty() const { return xyz_.empty(); }

  Vec3 operator[](std::size_t i) const { return {xyz_[3 * i], xyz_[3 * i + 1], xyz_[3 * i + 2]}; }
  void set(std::size_t i, const Vec3& p) {
    xyz_[3 * i] = p[0];
    xyz_[3 * i + 1] = p[1];
    xyz_[3 * i + 2] = p[2];
  }

  std::span<const float> xyz() const { return xyz_; }
  std::vector<float>& mutable_xyz() { return xyz_; }

  PointCloud select(std::span<const std::size_t> indices) const;

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::vector<float> xyz_;
};

}  // namespace deformpic
