#include "nrt/grid.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "nrt/error.hpp"

namespace nrt {

VoxelGrid::VoxelGrid(std::span<const Vec3> points, double cell) : cell_(cell) {
  if (cell <= 0) throw Error("VoxelGrid: cell size must be positive");
  points_.assign(points.begin(), points.end());
  cells_.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i)
    cells_[key_of(points_[i])].push_back(static_cast<int>(i));
}

VoxelGrid::CellKey VoxelGrid::key_of(const Vec3& p) const {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell_)),
          static_cast<std::int64_t>(std::floor(p.y() / cell_)),
          static_cast<std::int64_t>(std::floor(p.z() / cell_))};
}

void VoxelGrid::radius_query(const Vec3& q, double radius, std::vector<int>& out) const {
  out.clear();
  if (radius < 0) throw Error("VoxelGrid: negative radius");
  const double r2 = radius * radius;
  const std::int64_t span = static_cast<std::int64_t>(std::floor(radius / cell_)) + 1;
  // Radii spanning more cells than there are points degrade to a plain scan.
  const double cells_to_visit = std::pow(2.0 * static_cast<double>(span) + 1.0, 3);
  if (cells_to_visit > 4.0 * static_cast<double>(points_.size())) {
    for (std::size_t i = 0; i < points_.size(); ++i)
      if ((points_[i] - q).squaredNorm() <= r2) out.push_back(static_cast<int>(i));
    return;
  }
  const CellKey c = key_of(q);
  for (std::int64_t dz = -span; dz <= span; ++dz)
    for (std::int64_t dy = -span; dy <= span; ++dy)
      for (std::int64_t dx = -span; dx <= span; ++dx) {
        const auto it = cells_.find({c.x + dx, c.y + dy, c.z + dz});
        if (it == cells_.end()) continue;
        for (int idx : it->second)
          if ((points_[idx] - q).squaredNorm() <= r2) out.push_back(idx);
      }
  std::sort(out.begin(), out.end());
}

std::vector<int> VoxelGrid::radius_query(const Vec3& q, double radius) const {
  std::vector<int> out;
  radius_query(q, radius, out);
  return out;
}

double VoxelGrid::mean_occupancy() const {
  if (cells_.empty()) return 0;
  return static_cast<double>(points_.size()) / static_cast<double>(cells_.size());
}

std::vector<int> VoxelGrid::knn(const Vec3& q, int k) const {
  std::vector<std::pair<double, int>> scratch;
  std::vector<int> out;
  knn(q, k, scratch, out);
  return out;
}

void VoxelGrid::knn(const Vec3& q, int k, std::vector<std::pair<double, int>>& scratch,
                    std::vector<int>& out) const {
  if (k <= 0) throw Error("VoxelGrid: knn needs k > 0");
  if (static_cast<std::size_t>(k) > points_.size())
    throw Error("VoxelGrid: knn asked for more neighbours than points");

  // Expand the search radius shell by shell; a candidate set is final once
  // the k-th best distance is covered by the scanned shell radius.
  scratch.clear();
  const CellKey c = key_of(q);
  for (std::int64_t shell = 0;; ++shell) {
    for (std::int64_t dz = -shell; dz <= shell; ++dz)
      for (std::int64_t dy = -shell; dy <= shell; ++dy)
        for (std::int64_t dx = -shell; dx <= shell; ++dx) {
          if (std::max({std::llabs(dx), std::llabs(dy), std::llabs(dz)}) != shell) continue;
          const auto it = cells_.find({c.x + dx, c.y + dy, c.z + dz});
          if (it == cells_.end()) continue;
          for (int idx : it->second) scratch.emplace_back((points_[idx] - q).squaredNorm(), idx);
        }
    if (static_cast<int>(scratch.size()) >= k) {
      std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
      const double kth = std::sqrt(scratch[k - 1].first);
      // Every unscanned cell is at least shell*cell_ away from q; strict
      // comparison keeps index-order tie breaking exact at the boundary.
      if (kth < static_cast<double>(shell) * cell_) break;
    }
    if (shell > static_cast<std::int64_t>(points_.size()) + 2 && scratch.empty())
      throw Error("VoxelGrid: knn search ran away");  // unreachable guard
  }
  std::partial_sort(scratch.begin(), scratch.begin() + k, scratch.end());
  out.resize(k);
  for (int i = 0; i < k; ++i) out[i] = scratch[i].second;
}

}  // namespace nrt
