#include "nrt/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <cmath>

#include "nrt/error.hpp"
#include "nrt/grid.hpp"

namespace nrt {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr int kRenormalizeChain = 100;
}  // namespace

void CameraIntrinsics::validate() const {
  if (fx <= 0 || fy <= 0) throw Error("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error("intrinsics: image size must be positive");
  if (cx < 0 || cx >= width || cy < 0 || cy >= height)
    throw Error("intrinsics: principal point outside image");
}

double CameraIntrinsics::diagonal() const {
  return std::sqrt(static_cast<double>(width) * width + static_cast<double>(height) * height);
}

SE3Pose::SE3Pose(const Mat3& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  const double dev = (rotation_.transpose() * rotation_ - Mat3::Identity()).norm();
  if (dev > 1e-12) renormalize();
  if (rotation_.determinant() < 0)
    throw Error("SE3Pose: rotation has negative determinant (reflection)");
}

SE3Pose SE3Pose::compose(const SE3Pose& rhs) const {
  SE3Pose out;
  out.rotation_ = rotation_ * rhs.rotation_;
  out.translation_ = rotation_ * rhs.translation_ + translation_;
  out.chain_ = std::max(chain_, rhs.chain_) + 1;
  if (out.chain_ > kRenormalizeChain) out.renormalize();
  return out;
}

SE3Pose SE3Pose::inverse() const {
  SE3Pose out;
  out.rotation_ = rotation_.transpose();
  out.translation_ = -(out.rotation_ * translation_);
  out.chain_ = chain_ + 1;
  if (out.chain_ > kRenormalizeChain) out.renormalize();
  return out;
}

void SE3Pose::renormalize() {
  Eigen::JacobiSVD<Mat3> svd(rotation_, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  rotation_ = svd.matrixU() * d * svd.matrixV().transpose();
  chain_ = 0;
}

Mat3 rotation_about_axis(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

std::vector<PixelPoint> backproject(const DepthImage& depth, const CameraIntrinsics& intr) {
  intr.validate();
  if (depth.width != intr.width || depth.height != intr.height)
    throw Error("backproject: depth raster dimensions mismatch intrinsics");
  std::vector<PixelPoint> out;
  out.reserve(depth.data.size());
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      const double d = depth.at(u, v);
      if (d <= 0) continue;
      out.push_back({u, v, Vec3((u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d)});
    }
  }
  return out;
}

std::optional<Eigen::Vector2d> project(const Vec3& cam_point, const CameraIntrinsics& intr) {
  if (cam_point.z() <= 1e-12) return std::nullopt;
  return Eigen::Vector2d(intr.fx * cam_point.x() / cam_point.z() + intr.cx,
                         intr.fy * cam_point.y() / cam_point.z() + intr.cy);
}

std::vector<Vec3> estimate_normals(std::span<const Vec3> points, int k) {
  if (static_cast<int>(points.size()) < k)
    throw Error("estimate_normals: fewer points than neighborhood size");

  // Grid cell sized from the average point spacing keeps knn shells small.
  Vec3 lo = points[0], hi = points[0];
  for (const Vec3& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = std::max((hi - lo).maxCoeff(), 1e-6);
  double cell = std::max(extent / std::cbrt(static_cast<double>(points.size())) * 2.0, 1e-6);
  VoxelGrid grid(points, cell);
  // The volumetric estimate above overshoots badly on surface-like clouds
  // (depth frames); rebuild once aiming for about k/2 points per cell.
  const double target = std::max(4.0, 0.5 * static_cast<double>(k));
  if (grid.mean_occupancy() > 4.0 * target) {
    cell = std::max(cell / std::sqrt(grid.mean_occupancy() / target), 1e-6);
    grid = VoxelGrid(points, cell);
  }

  std::vector<Vec3> normals(points.size());
  Eigen::SelfAdjointEigenSolver<Mat3> eig;
  std::vector<std::pair<double, int>> scratch;
  std::vector<int> nbrs;
  for (std::size_t i = 0; i < points.size(); ++i) {
    grid.knn(points[i], k, scratch, nbrs);
    Vec3 mean = Vec3::Zero();
    for (int j : nbrs) mean += points[j];
    mean /= static_cast<double>(nbrs.size());
    Mat3 cov = Mat3::Zero();
    for (int j : nbrs) {
      const Vec3 d = points[j] - mean;
      cov += d * d.transpose();
    }
    eig.computeDirect(cov);
    Vec3 n = eig.eigenvectors().col(0);  // smallest eigenvalue
    if (n.dot(points[i]) > 0) n = -n;    // face the camera origin
    normals[i] = n.normalized();
  }
  return normals;
}

SE3Pose kabsch(std::span<const Vec3> cam_pts, std::span<const Vec3> world_pts) {
  if (cam_pts.size() != world_pts.size()) throw Error("kabsch: point lists differ in length");
  const std::size_t n = cam_pts.size();
  if (n < 3) throw Error("kabsch: need at least 3 correspondences");

  Vec3 cam_mean = Vec3::Zero(), world_mean = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    cam_mean += cam_pts[i];
    world_mean += world_pts[i];
  }
  cam_mean /= static_cast<double>(n);
  world_mean /= static_cast<double>(n);

  Eigen::Matrix3Xd a(3, n), b(3, n);
  for (std::size_t i = 0; i < n; ++i) {
    a.col(i) = cam_pts[i] - cam_mean;
    b.col(i) = world_pts[i] - world_mean;
  }

  // Collinear inputs leave the rotation about the line unobservable. A
  // centered point set always has rank <= min(3, n-1); collinearity shows up
  // as a vanishing *second* singular value.
  {
    Eigen::JacobiSVD<Eigen::Matrix3Xd> sa(a), sb(b);
    if (sa.singularValues()(1) < 1e-9 * sa.singularValues()(0) ||
        sb.singularValues()(1) < 1e-9 * sb.singularValues()(0))
      throw Error("kabsch: degenerate (collinear) point configuration");
  }

  const Mat3 h = a * b.transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return SE3Pose(r, world_mean - r * cam_mean);
}

PoseError pose_error(const SE3Pose& pred, const SE3Pose& gt) {
  PoseError e;
  e.translation_m = (pred.translation() - gt.translation()).norm();
  const double c = ((pred.rotation().transpose() * gt.rotation()).trace() - 1.0) / 2.0;
  e.rotation_deg = std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / kPi;
  return e;
}

}  // namespace nrt
