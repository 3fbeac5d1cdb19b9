#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/grid.hpp"
#include "nrt/image.hpp"
#include "nrt/partition_tree.hpp"

namespace nrt {

inline constexpr int kOutlierLabel = -1;
inline constexpr int kContextDim = 7;  // color (3) + reduced pair feature (4)

// Reduced pair feature: (angle(n_q, d), angle(n_o, d), angle(n_q, n_o), |d|)
// with d = p_q - p_o. Angles in radians; both direction angles are 0 when
// |d| < 1e-9. Invariant under a common rigid transform of both points.
Eigen::Vector4d ppf(const OrientedPoint& query, const OrientedPoint& context);

// Camera-space oriented points of one frame plus a spatial index for ball
// queries. Pixel coordinates are kept for mask lookups and diagnostics.
struct FrameCloud {
  std::vector<OrientedPoint> points;
  std::vector<std::pair<int, int>> pixels;  // (u, v) per point
  std::unique_ptr<VoxelGrid> index;

  int size() const { return static_cast<int>(points.size()); }
};

FrameCloud make_frame_cloud(const ColorImage* color, const DepthImage& depth,
                            const CameraIntrinsics& intrinsics, int normal_k = 17);

// Fixed-size network input: query chromaticity + N context rows of
// (context chromaticity, reduced pair feature). Chromaticity (channel share
// of the color sum) cancels per-frame scalar illumination.
struct RoutingSample {
  std::array<float, 3> query_color{0, 0, 0};
  std::vector<float> context;  // N x kContextDim, row-major

  int context_count() const { return static_cast<int>(context.size()) / kContextDim; }
};

// Indices into frame.points within the ball around the query, drawn without
// replacement; sparse balls are padded by drawing with replacement to exactly
// n. Throws when the ball is empty.
std::vector<int> sample_context_indices(const FrameCloud& frame, const Vec3& query_position,
                                        double radius, int n, std::mt19937_64& rng);

RoutingSample make_routing_sample(const FrameCloud& frame, int query_index, double radius, int n,
                                  std::mt19937_64& rng);

struct LabeledSample {
  RoutingSample sample;
  int node_id = kEmptyChild;
  int label = kOutlierLabel;  // child slot, or kOutlierLabel
};

// Frame with ground-truth pose, ready for label generation.
struct PosedFrameCloud {
  FrameCloud cloud;
  SE3Pose pose;  // camera-to-world
};

// Precomputes per-point tree locations over a set of posed frames so that
// per-node training sets can be drawn cheaply. Query pixels are uniform over
// valid-depth points; inliers for a node are points whose locate path passes
// through it toward a materialized child, outliers are points located
// elsewhere (including out of the root box). Points blocked at an empty slot
// of the node itself are discarded for that node.
class TrainingSetBuilder {
 public:
  TrainingSetBuilder(std::span<const PosedFrameCloud> frames, const PartitionTree& tree);

  // count total samples split inlier_ratio:1; the root node takes inliers
  // only. Throws when no frame covers the node.
  std::vector<LabeledSample> make_training_set(int node_id, int count, int inlier_ratio,
                                               int context_n, std::uint64_t seed) const;

  // Inlier candidate count for a node (pixels routed through it).
  int coverage(int node_id) const;

  const PartitionTree& tree() const { return tree_; }
  std::span<const PosedFrameCloud> frames() const { return frames_; }

 private:
  struct NodePool {
    std::vector<std::uint32_t> points;  // global point indices routed through the node
    std::vector<std::uint8_t> slots;    // slot taken from the node, parallel to points
  };
  std::span<const PosedFrameCloud> frames_;
  const PartitionTree& tree_;
  std::vector<NodePool> pools_;  // node id -> inlier candidates (split nodes only)
  // visited_[level][global point] = node id the point passed through at that
  // split level, or kEmptyChild; drives outlier candidate rejection.
  std::vector<std::vector<std::int32_t>> visited_;
  std::vector<std::size_t> frame_offset_;  // global index = offset[frame] + point
  std::size_t total_points_ = 0;

  std::pair<std::uint32_t, std::uint32_t> resolve(std::size_t global) const;
};

// Convenience wrapper building the index for a single node query.
std::vector<LabeledSample> make_training_set(std::span<const PosedFrameCloud> frames,
                                             const PartitionTree& tree, int node_id, int count,
                                             int inlier_ratio, int context_n, std::uint64_t seed);

void save_training_set(std::span<const LabeledSample> samples, int context_n,
                       const std::filesystem::path& path);
std::vector<LabeledSample> load_training_set(const std::filesystem::path& path);

}  // namespace nrt
