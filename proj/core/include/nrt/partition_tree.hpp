#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/scene_model.hpp"

namespace nrt {

inline constexpr int kEmptyChild = -1;

struct Box {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Zero();

  Vec3 extent() const { return max_corner - min_corner; }
  double volume() const { return extent().prod(); }
  double longest_edge() const { return extent().maxCoeff(); }
  bool contains(const Vec3& p) const {
    return (p.array() >= min_corner.array()).all() && (p.array() <= max_corner.array()).all();
  }
};

struct SlotBox {
  int slot = 0;
  Box box;
};

// Applies the longest-edge halving rule z times to every produced half.
// Bit i of the slot records the side taken at cut i (0 = lower). Edge-length
// ties break by axis order x, y, z.
std::vector<SlotBox> split_box(const Box& box, int z);

// Slot a point would take under z cuts of the box. Points exactly on a cut
// plane go to the lower side, matching split_box's closed lower halves.
int slot_of_point(const Box& box, int z, const Vec3& p);

struct LeafPoint {
  Vec3 position;  // world frame
  std::array<double, 3> color{0, 0, 0};
};

struct TreeNode {
  int id = kEmptyChild;
  int level = 0;
  int parent = kEmptyChild;
  int parent_slot = kEmptyChild;
  Box box;                     // root frame
  double ball_radius = 0;      // longest edge of box
  std::vector<int> children;   // size m for split nodes (kEmptyChild marks empty slots)
  std::vector<LeafPoint> leaf_points;  // leaves only

  bool is_leaf() const { return children.empty(); }
};

struct LocateResult {
  enum class Status { kLeaf, kEmptyRegion, kOutOfBox };
  struct Step {
    int node_id;
    int child_slot;
  };
  Status status = Status::kOutOfBox;
  std::vector<Step> steps;      // successful descents, root first
  int leaf_id = kEmptyChild;    // valid when status == kLeaf
  int blocked_node = kEmptyChild;  // node whose chosen slot was EMPTY
  int blocked_slot = kEmptyChild;

  bool at_leaf() const { return status == Status::kLeaf; }
};

class PartitionTree {
 public:
  PartitionTree() = default;

  int levels() const { return levels_; }
  int branching() const { return branching_; }
  int z_cuts() const { return z_cuts_; }
  BoxStrategy strategy() const { return strategy_; }
  const Mat3& frame_rotation() const { return frame_rotation_; }
  int root_id() const { return 0; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const TreeNode& node(int id) const;
  std::span<const TreeNode> nodes() const { return nodes_; }

  // Materialized node ids at a level, ascending.
  std::vector<int> nodes_at_level(int level) const;
  int split_node_count() const;
  int leaf_node_count() const;

  LocateResult locate(const Vec3& world_point) const;

  // Walks parent links from a node up to the root; result is ordered root
  // first and includes the node itself.
  std::vector<int> path_to_root(int node_id) const;

  void serialize(std::ostream& os) const;
  static PartitionTree deserialize(std::istream& is);

 private:
  friend PartitionTree build_tree(const WorldPointCloud&, const RootBox&, int, int, int,
                                  BoxStrategy);
  int levels_ = 0;
  int branching_ = 0;
  int z_cuts_ = 0;
  BoxStrategy strategy_ = BoxStrategy::kOriginal;
  Mat3 frame_rotation_ = Mat3::Identity();
  std::vector<TreeNode> nodes_;  // id-indexed, depth-first preorder
};

// Top-down construction. A node materializes only when at least
// min_leaf_points cloud points fall in its box; split nodes additionally
// require a materialized child (dead-end interior nodes are pruned). Node ids
// follow depth-first preorder.
PartitionTree build_tree(const WorldPointCloud& cloud, const RootBox& root, int t_levels,
                         int m_branching, int min_leaf_points = 20,
                         BoxStrategy strategy = BoxStrategy::kOriginal);

void save_tree(const PartitionTree& tree, const std::filesystem::path& path);
PartitionTree load_tree(const std::filesystem::path& path);

}  // namespace nrt
