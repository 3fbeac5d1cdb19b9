#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "nrt/geometry.hpp"

namespace nrt {

/// Uniform hash grid over 3D points for radius and k-nearest-neighbor queries.
/// Query results are returned in ascending point-index order (radius) or by
/// (distance, index) (knn), so downstream sampling is order-deterministic.
class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(std::span<const Vec3> points, double cell);

  std::size_t size() const { return points_.size(); }
  double cell() const { return cell_; }
  /// Points per occupied cell; high values mean the cell size is too coarse
  /// for the data (surfaces pack quadratically more points than volumes).
  double mean_occupancy() const;

  std::vector<int> radius_query(const Vec3& q, double radius) const;
  void radius_query(const Vec3& q, double radius, std::vector<int>& out) const;

  /// Exact k nearest neighbors (includes the query point if it is a member).
  std::vector<int> knn(const Vec3& q, int k) const;
  /// Allocation-free variant for hot loops; scratch is caller-owned.
  void knn(const Vec3& q, int k, std::vector<std::pair<double, int>>& scratch,
           std::vector<int>& out) const;

 private:
  struct CellKey {
    std::int64_t x, y, z;
    bool operator==(const CellKey&) const = default;
  };
  struct CellHash {
    std::size_t operator()(const CellKey& k) const noexcept {
      std::uint64_t h = static_cast<std::uint64_t>(k.x) * 0x9e3779b97f4a7c15ULL;
      h ^= static_cast<std::uint64_t>(k.y) * 0xc2b2ae3d27d4eb4fULL;
      h ^= static_cast<std::uint64_t>(k.z) * 0x165667b19e3779f9ULL;
      h ^= h >> 29;
      return static_cast<std::size_t>(h);
    }
  };

  CellKey key_of(const Vec3& p) const;

  std::vector<Vec3> points_;
  double cell_ = 1.0;
  std::unordered_map<CellKey, std::vector<int>, CellHash> cells_;
};

}  // namespace nrt
