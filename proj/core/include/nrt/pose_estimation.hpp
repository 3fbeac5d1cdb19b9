#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/grid.hpp"
#include "nrt/leaf_gmm.hpp"
#include "nrt/routing_features.hpp"
#include "nrt/routing_inference.hpp"
#include "nrt/scene_model.hpp"

namespace nrt {

struct PoseHypothesis {
  SE3Pose pose;
  double score = 0;  // accumulated clamped Mahalanobis energy, lower is better
  std::vector<int> inliers;  // batch indices with Mahalanobis < inlier_mahal, last round
};

struct RansacConfig {
  int hypothesis_count = 1024;  // power of two
  int eval_batch = 500;
  double rigidity_tol = 0.1;   // relative pairwise-distance tolerance
  int max_resample = 50;       // attempts per hypothesis
  double mahal_clamp = 10.0;
  double inlier_mahal = 3.0;   // local-refit inlier gate
  bool icp = true;
  int icp_max_iter = 20;
  double icp_convergence = 1e-5;  // meters (and radians) per-step threshold
  double icp_pair_radius = 0.1;   // nearest-neighbor association gate, meters
  int icp_min_pairs = 100;
  int icp_max_points = 2000;   // frame points used, strided deterministically
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

// Camera-space query point paired with a sampled world mode.
struct Correspondence {
  Vec3 camera = Vec3::Zero();
  Vec3 world = Vec3::Zero();
  const GaussianMode* mode = nullptr;
};

std::unordered_map<int, const LeafGMM*> make_gmm_index(std::span<const LeafGMM> gmms);

// Draws correspondences from routed queries. With several trees (a forest)
// the per-query leaf sets are unioned; a query only counts as rejected when
// every tree rejected it.
class CorrespondenceSampler {
 public:
  // per_tree[t] are the routing results of tree t over the same
  // query_indices; gmm_maps[t] resolves that tree's leaf ids.
  CorrespondenceSampler(const FrameCloud& frame, std::span<const int> query_indices,
                        std::span<const std::vector<RoutingResult>> per_tree,
                        std::span<const std::unordered_map<int, const LeafGMM*>> gmm_maps);

  bool usable() const { return !queries_.empty(); }
  int usable_count() const { return static_cast<int>(queries_.size()); }
  int query_count() const { return query_total_; }
  int rejected_count() const { return rejected_; }
  double rejection_rate() const;

  Correspondence draw(std::mt19937_64& rng) const;

 private:
  struct RoutedQuery {
    Vec3 camera;
    std::vector<LeafChoice> leaves;
  };
  std::vector<RoutedQuery> queries_;
  int query_total_ = 0;
  int rejected_ = 0;
};

// Kabsch over random rigidity-checked triples. Throws when some hypothesis
// cannot find a rigid triple within max_resample attempts.
std::vector<PoseHypothesis> generate_hypotheses(const CorrespondenceSampler& sampler,
                                                const RansacConfig& cfg);

struct RansacResult {
  PoseHypothesis best;
  std::vector<double> round_best_scores;  // survivor minimum per round
  bool degraded = false;  // sampler ran dry mid-run; best-so-far returned
};

// Halves the hypothesis set each round on accumulated clamped Mahalanobis
// energy over a shared fresh batch, refitting survivors on their batch
// inliers.
RansacResult preemptive_ransac(std::vector<PoseHypothesis> hypotheses,
                               const CorrespondenceSampler& sampler, const RansacConfig& cfg);

// Fused scene cloud plus a spatial index for nearest-neighbor association.
struct SceneIndex {
  explicit SceneIndex(const WorldPointCloud& cloud);

  const WorldPointCloud* cloud = nullptr;
  VoxelGrid grid;
};

struct IcpResult {
  SE3Pose pose;
  bool refined = false;    // false: too few pairs, initial pose kept
  bool kept_initial = false;  // refinement ran but ranked worse than input
  int iterations = 0;
  double initial_residual = 0;  // mean |point-to-plane| against the scene
  double final_residual = 0;
};

IcpResult icp_refine(const SE3Pose& initial, const FrameCloud& frame, const SceneIndex& scene,
                     const RansacConfig& cfg);

// One tree's artifacts for localization; a forest passes several.
struct ModelArm {
  const PartitionTree* tree = nullptr;
  const NodeClassifier* classifier = nullptr;
  const std::unordered_map<int, const LeafGMM*>* gmms = nullptr;
};

struct LocalizeConfig {
  RouteConfig route;
  RansacConfig ransac;
  int query_count = 384;  // pixels drawn per frame
  std::uint64_t seed = 0;
  int threads = 1;
};

struct LocalizeDiagnostics {
  int query_count = 0;
  int routed = 0;
  int rejected = 0;
  int dead_end = 0;
  double rejection_rate = 0;
  std::vector<double> round_best_scores;
  bool icp_ran = false;
  bool icp_kept_initial = false;
  double icp_initial_residual = 0;
  double icp_final_residual = 0;
  bool degraded = false;
  double routing_seconds = 0;
  double ransac_seconds = 0;
  double icp_seconds = 0;
  // Query-level routing of the first arm, for mask-based rejection scoring.
  std::vector<int> query_indices;
  std::vector<RoutingResult> first_arm_routing;
};

struct LocalizeResult {
  bool valid = false;  // false marks the frame N/A
  SE3Pose pose;
  std::string failure;  // reason when invalid
  LocalizeDiagnostics diagnostics;
};

// Full relocalization of one frame: query sampling, per-tree routing,
// correspondence sampling across the forest, hypothesis generation,
// preemptive RANSAC and optional ICP. Never throws for unlocalizable
// frames; those come back invalid with the failure reason.
LocalizeResult localize_frame(const FrameCloud& frame, std::span<const ModelArm> arms,
                              const SceneIndex* scene, const LocalizeConfig& cfg);

// Trajectory text format: one line per frame,
// "frame_id r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 status"
// with status "ok" or "na" (pose entries are zero for "na").
struct TrajectoryEntry {
  int frame_id = 0;
  bool valid = false;
  SE3Pose pose;
};

void write_trajectory(std::span<const TrajectoryEntry> entries,
                      const std::filesystem::path& path);
std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path);

}  // namespace nrt
