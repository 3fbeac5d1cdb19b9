#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "nrt/image.hpp"

namespace nrt {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole camera; no distortion model.
struct CameraIntrinsics {
  double fx = 0, fy = 0;  // focal lengths, pixels
  double cx = 0, cy = 0;  // principal point, pixels
  int width = 0, height = 0;

  void validate() const;
  double diagonal() const;
};

/// Rigid transform mapping camera-space points into world space:
/// world = rotation * cam + translation. The rotation stays orthonormal
/// (det +1); long composition chains are re-orthonormalized via polar
/// decomposition to keep float drift bounded.
class SE3Pose {
 public:
  SE3Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  SE3Pose(const Mat3& rotation, const Vec3& translation);

  static SE3Pose identity() { return SE3Pose(); }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 rotate(const Vec3& v) const { return rotation_ * v; }

  SE3Pose compose(const SE3Pose& rhs) const;  // this ∘ rhs
  SE3Pose inverse() const;

  /// Polar re-orthonormalization (nearest rotation in Frobenius norm).
  void renormalize();

 private:
  Mat3 rotation_;
  Vec3 translation_;
  int chain_ = 0;  // compositions since last renormalization
};

/// Rotation by angle (radians) about a (not necessarily unit) axis.
Mat3 rotation_about_axis(const Vec3& axis, double angle);

/// Camera- or world-frame observation unit: position, unit normal, RGB in [0,1].
struct OrientedPoint {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 color = Vec3::Zero();
};

struct PixelPoint {
  int u = 0;
  int v = 0;
  Vec3 position = Vec3::Zero();  // camera space
};

/// Back-projects every valid (depth > 0) pixel into camera space:
/// ((u-cx)d/fx, (v-cy)d/fy, d). Invalid pixels are omitted.
std::vector<PixelPoint> backproject(const DepthImage& depth, const CameraIntrinsics& intr);

/// Projects a camera-space point to pixel coordinates; nullopt behind the camera.
std::optional<Eigen::Vector2d> project(const Vec3& cam_point, const CameraIntrinsics& intr);

/// Per-point normals from the smallest covariance eigenvector of the k nearest
/// neighbors, flipped to face the camera origin (normal . position < 0).
std::vector<Vec3> estimate_normals(std::span<const Vec3> points, int k = 17);

/// Least-squares rigid alignment: returns the pose minimizing
/// sum ||R*cam_i + t - world_i||^2, with the usual determinant correction.
/// Throws on collinear/degenerate input.
SE3Pose kabsch(std::span<const Vec3> cam_pts, std::span<const Vec3> world_pts);

struct PoseError {
  double translation_m = 0;
  double rotation_deg = 0;
};

PoseError pose_error(const SE3Pose& pred, const SE3Pose& gt);

}  // namespace nrt
