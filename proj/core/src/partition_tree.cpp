#include "nrt/partition_tree.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nrt/binary_io.hpp"
#include "nrt/error.hpp"

namespace nrt {

namespace {

constexpr char kTreeMagic[4] = {'N', 'R', 'T', 'R'};
constexpr std::uint32_t kTreeVersion = 1;

int longest_axis(const Box& box) {
  const Vec3 e = box.extent();
  int axis = 0;
  if (e.y() > e.x()) axis = 1;
  if (e.z() > e[axis]) axis = 2;
  return axis;
}

void check_box(const Box& box) {
  if ((box.extent().array() <= 0).any()) throw Error("split_box: degenerate box");
}

}  // namespace

std::vector<SlotBox> split_box(const Box& box, int z) {
  if (z < 1) throw Error("split_box: need at least one cut");
  check_box(box);
  std::vector<SlotBox> halves{{0, box}};
  for (int cut = 0; cut < z; ++cut) {
    std::vector<SlotBox> next;
    next.reserve(halves.size() * 2);
    for (const SlotBox& sb : halves) {
      const int axis = longest_axis(sb.box);
      const double mid = 0.5 * (sb.box.min_corner[axis] + sb.box.max_corner[axis]);
      Box lo = sb.box, hi = sb.box;
      lo.max_corner[axis] = mid;
      hi.min_corner[axis] = mid;
      next.push_back({sb.slot, lo});
      next.push_back({sb.slot | (1 << cut), hi});
    }
    halves = std::move(next);
  }
  std::sort(halves.begin(), halves.end(),
            [](const SlotBox& a, const SlotBox& b) { return a.slot < b.slot; });
  return halves;
}

int slot_of_point(const Box& box, int z, const Vec3& p) {
  Box current = box;
  int slot = 0;
  for (int cut = 0; cut < z; ++cut) {
    const int axis = longest_axis(current);
    const double mid = 0.5 * (current.min_corner[axis] + current.max_corner[axis]);
    if (p[axis] <= mid) {
      current.max_corner[axis] = mid;
    } else {
      current.min_corner[axis] = mid;
      slot |= 1 << cut;
    }
  }
  return slot;
}

const TreeNode& PartitionTree::node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw Error("PartitionTree: node id out of range");
  return nodes_[id];
}

std::vector<int> PartitionTree::nodes_at_level(int level) const {
  std::vector<int> out;
  for (const TreeNode& n : nodes_)
    if (n.level == level) out.push_back(n.id);
  std::sort(out.begin(), out.end());
  return out;
}

int PartitionTree::split_node_count() const {
  int count = 0;
  for (const TreeNode& n : nodes_)
    if (!n.is_leaf()) ++count;
  return count;
}

int PartitionTree::leaf_node_count() const { return node_count() - split_node_count(); }

LocateResult PartitionTree::locate(const Vec3& world_point) const {
  LocateResult result;
  if (nodes_.empty()) throw Error("locate: tree not built");
  const Vec3 p = frame_rotation_ * world_point;
  if (!nodes_[0].box.contains(p)) {
    result.status = LocateResult::Status::kOutOfBox;
    return result;
  }
  int current = 0;
  while (!nodes_[current].is_leaf()) {
    const TreeNode& n = nodes_[current];
    const int slot = slot_of_point(n.box, z_cuts_, p);
    const int child = n.children[slot];
    if (child == kEmptyChild) {
      result.status = LocateResult::Status::kEmptyRegion;
      result.blocked_node = current;
      result.blocked_slot = slot;
      return result;
    }
    result.steps.push_back({current, slot});
    current = child;
  }
  result.status = LocateResult::Status::kLeaf;
  result.leaf_id = current;
  return result;
}

std::vector<int> PartitionTree::path_to_root(int node_id) const {
  std::vector<int> path;
  for (int id = node_id; id != kEmptyChild; id = node(id).parent) path.push_back(id);
  std::reverse(path.begin(), path.end());
  return path;
}

PartitionTree build_tree(const WorldPointCloud& cloud, const RootBox& root, int t_levels,
                         int m_branching, int min_leaf_points, BoxStrategy strategy) {
  if (t_levels < 2) throw Error("build_tree: need at least 2 levels");
  if (m_branching < 2 || (m_branching & (m_branching - 1)) != 0)
    throw Error("build_tree: branching must be a power of two");
  if (min_leaf_points < 1) throw Error("build_tree: min_leaf_points must be positive");

  const int z = static_cast<int>(std::round(std::log2(m_branching)));

  std::vector<Vec3> box_frame(cloud.points.size());
  std::vector<int> inside;
  const Box root_geom{root.min_corner, root.max_corner};
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    box_frame[i] = root.to_box_frame(cloud.points[i].position);
    if (root_geom.contains(box_frame[i])) inside.push_back(static_cast<int>(i));
  }
  if (static_cast<int>(inside.size()) < min_leaf_points)
    throw Error("build_tree: root box holds fewer points than min_leaf_points");

  PartitionTree tree;
  tree.levels_ = t_levels;
  tree.branching_ = m_branching;
  tree.z_cuts_ = z;
  tree.strategy_ = strategy;
  tree.frame_rotation_ = root.frame_rotation;

  // Recursive materialization; ids are assigned in depth-first preorder as
  // nodes are accepted, children visited in slot order.
  auto grow = [&](auto&& self, const Box& box, int level, int parent, int parent_slot,
                  std::vector<int>&& members) -> int {
    if (static_cast<int>(members.size()) < min_leaf_points) return kEmptyChild;
    const int id = static_cast<int>(tree.nodes_.size());
    tree.nodes_.emplace_back();
    {
      TreeNode& n = tree.nodes_.back();
      n.id = id;
      n.level = level;
      n.parent = parent;
      n.parent_slot = parent_slot;
      n.box = box;
      n.ball_radius = box.longest_edge();
    }
    if (level == t_levels - 1) {
      TreeNode& n = tree.nodes_[id];
      n.leaf_points.reserve(members.size());
      for (int idx : members) {
        const OrientedPoint& p = cloud.points[idx];
        n.leaf_points.push_back({p.position, {p.color.x(), p.color.y(), p.color.z()}});
      }
      return id;
    }
    std::vector<std::vector<int>> buckets(m_branching);
    for (int idx : members) buckets[slot_of_point(box, z, box_frame[idx])].push_back(idx);
    members.clear();
    const auto child_boxes = split_box(box, z);
    std::vector<int> children(m_branching, kEmptyChild);
    bool any = false;
    for (int slot = 0; slot < m_branching; ++slot) {
      const int child =
          self(self, child_boxes[slot].box, level + 1, id, slot, std::move(buckets[slot]));
      children[slot] = child;
      any = any || child != kEmptyChild;
    }
    if (!any) {
      // Dead-end interior node: nothing routable below, so the node itself
      // becomes empty. It is the most recently appended node.
      tree.nodes_.pop_back();
      return kEmptyChild;
    }
    tree.nodes_[id].children = std::move(children);
    return id;
  };
  if (grow(grow, root_geom, 0, kEmptyChild, kEmptyChild, std::move(inside)) == kEmptyChild)
    throw Error("build_tree: no populated leaf under the root box");
  return tree;
}

void PartitionTree::serialize(std::ostream& os) const {
  io::write_magic(os, kTreeMagic);
  io::write_scalar<std::uint32_t>(os, kTreeVersion);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(levels_));
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(branching_));
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(strategy_));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) io::write_scalar<double>(os, frame_rotation_(r, c));
  io::write_scalar<std::uint64_t>(os, nodes_.size());
  for (const TreeNode& n : nodes_) {  // ids are preorder, so this is DFS order
    io::write_scalar<std::int32_t>(os, n.id);
    io::write_scalar<std::int32_t>(os, n.level);
    io::write_scalar<std::int32_t>(os, n.parent);
    io::write_scalar<std::int32_t>(os, n.parent_slot);
    for (int i = 0; i < 3; ++i) io::write_scalar<double>(os, n.box.min_corner[i]);
    for (int i = 0; i < 3; ++i) io::write_scalar<double>(os, n.box.max_corner[i]);
    io::write_scalar<double>(os, n.ball_radius);
    io::write_scalar<std::uint8_t>(os, n.is_leaf() ? 1 : 0);
    if (!n.is_leaf()) {
      for (int child : n.children) io::write_scalar<std::int32_t>(os, child);
    } else {
      io::write_scalar<std::uint64_t>(os, n.leaf_points.size());
      for (const LeafPoint& p : n.leaf_points) {
        for (int i = 0; i < 3; ++i) io::write_scalar<float>(os, static_cast<float>(p.position[i]));
        for (int i = 0; i < 3; ++i) io::write_scalar<float>(os, 0.0f);  // normal slot, unused
        for (int i = 0; i < 3; ++i)
          io::write_scalar<std::uint8_t>(
              os, static_cast<std::uint8_t>(std::lround(std::clamp(p.color[i], 0.0, 1.0) * 255.0)));
      }
    }
  }
}

PartitionTree PartitionTree::deserialize(std::istream& is) {
  io::expect_magic(is, kTreeMagic, "tree file");
  if (io::read_scalar<std::uint32_t>(is, "tree version") != kTreeVersion)
    throw Error("tree file: unsupported version");
  PartitionTree tree;
  tree.levels_ = static_cast<int>(io::read_scalar<std::uint32_t>(is, "tree levels"));
  tree.branching_ = static_cast<int>(io::read_scalar<std::uint32_t>(is, "tree branching"));
  if (tree.branching_ < 2 || (tree.branching_ & (tree.branching_ - 1)) != 0)
    throw Error("tree file: corrupt branching factor");
  tree.z_cuts_ = static_cast<int>(std::round(std::log2(tree.branching_)));
  tree.strategy_ = static_cast<BoxStrategy>(io::read_scalar<std::uint32_t>(is, "tree strategy"));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      tree.frame_rotation_(r, c) = io::read_scalar<double>(is, "tree frame rotation");
  const auto count = io::read_scalar<std::uint64_t>(is, "tree node count");
  tree.nodes_.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TreeNode& n = tree.nodes_[i];
    n.id = io::read_scalar<std::int32_t>(is, "node id");
    if (n.id != static_cast<int>(i)) throw Error("tree file: node ids out of order");
    n.level = io::read_scalar<std::int32_t>(is, "node level");
    n.parent = io::read_scalar<std::int32_t>(is, "node parent");
    n.parent_slot = io::read_scalar<std::int32_t>(is, "node parent slot");
    for (int j = 0; j < 3; ++j) n.box.min_corner[j] = io::read_scalar<double>(is, "node box");
    for (int j = 0; j < 3; ++j) n.box.max_corner[j] = io::read_scalar<double>(is, "node box");
    n.ball_radius = io::read_scalar<double>(is, "node ball radius");
    const bool leaf = io::read_scalar<std::uint8_t>(is, "node leaf flag") != 0;
    if (!leaf) {
      n.children.resize(tree.branching_);
      for (int& child : n.children) child = io::read_scalar<std::int32_t>(is, "node child");
    } else {
      const auto points = io::read_scalar<std::uint64_t>(is, "leaf point count");
      n.leaf_points.resize(points);
      for (LeafPoint& p : n.leaf_points) {
        for (int j = 0; j < 3; ++j) p.position[j] = io::read_scalar<float>(is, "leaf position");
        for (int j = 0; j < 3; ++j) io::read_scalar<float>(is, "leaf normal");
        for (int j = 0; j < 3; ++j)
          p.color[j] = io::read_scalar<std::uint8_t>(is, "leaf color") / 255.0;
      }
    }
  }
  return tree;
}

void save_tree(const PartitionTree& tree, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_tree: cannot open " + path.string());
  tree.serialize(os);
  if (!os) throw Error("save_tree: write failed for " + path.string());
}

PartitionTree load_tree(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_tree: cannot open " + path.string());
  return PartitionTree::deserialize(is);
}

}  // namespace nrt
