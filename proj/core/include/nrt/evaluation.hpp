#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/image.hpp"
#include "nrt/routing_features.hpp"
#include "nrt/routing_inference.hpp"

namespace nrt {

// Dense correspondence reprojection error: valid pixels are lifted to world
// space with the ground-truth pose, reprojected under both poses, and the
// mean pixel displacement is normalized by the image diagonal. Pixels that
// land behind the predicted camera count a full diagonal of displacement.
// At most max_pixels valid pixels are used (deterministic stride).
// Throws when the frame has no valid depth.
double dcre(const DepthImage& depth, const CameraIntrinsics& intr, const SE3Pose& gt,
            const SE3Pose& pred, int max_pixels = 10000);

struct FrameResult {
  int frame_id = 0;
  bool valid = false;  // false marks N/A (no pose produced)
  SE3Pose predicted;
  SE3Pose ground_truth;
  double translation_error = 0;  // meters
  double rotation_error = 0;     // degrees
  double dcre_value = 0;
  double rejection_rate = 0;
  double seconds = 0;
};

struct EvalThresholds {
  double pose_translation = 0.05;  // meters
  double pose_rotation = 5.0;      // degrees
  double dcre_fine = 0.05;
  double dcre_coarse = 0.15;
  double dcre_outlier = 0.5;
};

struct BenchmarkSummary {
  int frame_count = 0;
  double pose_accuracy = 0;  // Pose(0.05m, 5deg), thresholds inclusive
  double dcre_fine = 0;      // DCRE(0.05)
  double dcre_coarse = 0;    // DCRE(0.15)
  double outlier = 0;        // Outlier(0.5), N/A frames included
  double na_fraction = 0;
  double score = 0;          // 1 + DCRE(0.05) - Outlier(0.5)
};

// N/A frames fail every positive metric and count as DCRE outliers.
BenchmarkSummary summarize(std::span<const FrameResult> results,
                           const EvalThresholds& thresholds = {});

// Query-level rejection accounting against synthetic dynamic masks.
struct RejectionCounts {
  std::int64_t dynamic_total = 0;
  std::int64_t dynamic_rejected = 0;
  std::int64_t static_total = 0;
  std::int64_t static_rejected = 0;

  void add(bool dynamic_query, bool rejected);
  void merge(const RejectionCounts& other);
};

RejectionCounts count_rejections(std::span<const RoutingResult> results,
                                 std::span<const int> query_indices, const FrameCloud& frame,
                                 const MaskImage& mask);

struct RejectionReport {
  bool true_rate_defined = false;  // false when no dynamic queries were seen
  double true_rejection = 0;       // rejected fraction of dynamic queries
  double false_rejection = 0;      // rejected fraction of static queries
};

RejectionReport rejection_report(const RejectionCounts& counts);

std::string summary_table(const BenchmarkSummary& summary,
                          const RejectionReport* rejection = nullptr);
void write_summary_kv(const BenchmarkSummary& summary, const RejectionReport* rejection,
                      const std::filesystem::path& path);
// Columns: frame, trans_err, rot_err, dcre, rejection_rate, status.
void write_frame_csv(std::span<const FrameResult> results, const std::filesystem::path& path);

}  // namespace nrt
