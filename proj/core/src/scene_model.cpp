#include "nrt/scene_model.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>

#include "nrt/binary_io.hpp"
#include "nrt/error.hpp"
#include "nrt/parallel.hpp"

namespace nrt {

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;
constexpr double kBoxEpsilon = 1e-6;  // keeps boundary points strictly inside
constexpr char kCloudMagic[4] = {'N', 'R', 'P', 'C'};
constexpr std::uint32_t kCloudVersion = 1;

struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int64_t v : {k.x, k.y, k.z}) {
      h ^= static_cast<std::uint64_t>(v);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

struct FramePoints {
  std::vector<OrientedPoint> points;  // world space
  std::vector<WorldPointCloud::Provenance> provenance;
};

FramePoints project_frame(const FuseFrame& frame, int frame_index, int normal_k) {
  if (!frame.depth) throw Error("fuse: frame without depth raster");
  const auto pixels = backproject(*frame.depth, frame.intrinsics);
  if (static_cast<int>(pixels.size()) < normal_k)
    throw Error("fuse: frame has too few valid pixels for normal estimation");

  std::vector<Vec3> cam_positions(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) cam_positions[i] = pixels[i].position;
  const auto normals = estimate_normals(cam_positions, normal_k);

  FramePoints out;
  out.points.resize(pixels.size());
  out.provenance.resize(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    OrientedPoint& p = out.points[i];
    p.position = frame.pose.apply(cam_positions[i]);
    p.normal = frame.pose.rotate(normals[i]);
    if (frame.color) {
      const auto& rgb = frame.color->at(pixels[i].u, pixels[i].v);
      p.color = {rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
    } else {
      p.color = {0, 0, 0};
    }
    out.provenance[i] = {frame_index, pixels[i].u, pixels[i].v};
  }
  return out;
}

}  // namespace

std::string_view to_string(BoxStrategy s) {
  switch (s) {
    case BoxStrategy::kOriginal: return "original";
    case BoxStrategy::kRot30: return "rot30";
    case BoxStrategy::kRot60: return "rot60";
    case BoxStrategy::kCompact: return "compact";
  }
  throw Error("unknown box strategy value");
}

BoxStrategy box_strategy_from_string(std::string_view name) {
  if (name == "original") return BoxStrategy::kOriginal;
  if (name == "rot30") return BoxStrategy::kRot30;
  if (name == "rot60") return BoxStrategy::kRot60;
  if (name == "compact") return BoxStrategy::kCompact;
  throw Error("unknown box strategy: " + std::string(name));
}

WorldPointCloud fuse(std::span<const FuseFrame> frames, double voxel, int threads, int normal_k) {
  if (frames.empty()) throw Error("fuse: empty frame list");
  if (voxel <= 0) throw Error("fuse: voxel size must be positive");

  std::vector<FramePoints> per_frame(frames.size());
  parallel_for(0, frames.size(), threads, [&](std::size_t i) {
    per_frame[i] = project_frame(frames[i], static_cast<int>(i), normal_k);
  });

  // Merge sequentially in frame order; per-voxel accumulators average the
  // contributions and output order follows first touch, so the result does
  // not depend on hash iteration order.
  struct Accum {
    Vec3 position = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    Vec3 color = Vec3::Zero();
    int count = 0;
    WorldPointCloud::Provenance first;
  };
  std::unordered_map<VoxelKey, int, VoxelKeyHash> slot_of;
  std::vector<Accum> accums;
  for (const FramePoints& fp : per_frame) {
    for (std::size_t i = 0; i < fp.points.size(); ++i) {
      const OrientedPoint& p = fp.points[i];
      const VoxelKey key{static_cast<std::int64_t>(std::floor(p.position.x() / voxel)),
                         static_cast<std::int64_t>(std::floor(p.position.y() / voxel)),
                         static_cast<std::int64_t>(std::floor(p.position.z() / voxel))};
      auto [it, inserted] = slot_of.try_emplace(key, static_cast<int>(accums.size()));
      if (inserted) {
        accums.emplace_back();
        accums.back().first = fp.provenance[i];
      }
      Accum& a = accums[it->second];
      a.position += p.position;
      a.normal += p.normal;
      a.color += Vec3(p.color[0], p.color[1], p.color[2]);
      ++a.count;
    }
  }

  WorldPointCloud cloud;
  cloud.points.reserve(accums.size());
  cloud.provenance.reserve(accums.size());
  for (const Accum& a : accums) {
    OrientedPoint p;
    p.position = a.position / a.count;
    p.normal = a.normal.norm() > 1e-12 ? Vec3(a.normal.normalized()) : Vec3::UnitZ();
    const Vec3 c = a.color / a.count;
    p.color = {c.x(), c.y(), c.z()};
    cloud.points.push_back(p);
    cloud.provenance.push_back(a.first);
  }
  if (cloud.points.empty()) throw Error("fuse: no valid pixels in any frame");
  return cloud;
}

RootBox root_box(const WorldPointCloud& cloud, BoxStrategy strategy) {
  if (cloud.points.empty()) throw Error("root_box: empty cloud");

  Mat3 rotation = Mat3::Identity();
  switch (strategy) {
    case BoxStrategy::kOriginal:
      break;
    case BoxStrategy::kRot30:
    case BoxStrategy::kRot60: {
      const double angle = (strategy == BoxStrategy::kRot30 ? 30.0 : 60.0) * kDeg;
      rotation = rotation_about_axis(Vec3::UnitY(), angle) *
                 rotation_about_axis(Vec3::UnitX(), angle);
      break;
    }
    case BoxStrategy::kCompact: {
      Vec3 mean = Vec3::Zero();
      for (const OrientedPoint& p : cloud.points) mean += p.position;
      mean /= static_cast<double>(cloud.points.size());
      Mat3 cov = Mat3::Zero();
      for (const OrientedPoint& p : cloud.points) {
        const Vec3 d = p.position - mean;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
      // Columns reordered to descending variance, signs canonicalized on the
      // largest-magnitude component so the frame is permutation independent.
      Mat3 axes;
      for (int i = 0; i < 3; ++i) {
        Vec3 v = eig.eigenvectors().col(2 - i);
        int arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        axes.col(i) = v;
      }
      if (axes.determinant() < 0) axes.col(2) = -axes.col(2);
      rotation = axes.transpose();
      break;
    }
  }

  RootBox box;
  box.frame_rotation = rotation;
  Vec3 lo = rotation * cloud.points[0].position;
  Vec3 hi = lo;
  for (const OrientedPoint& p : cloud.points) {
    const Vec3 q = rotation * p.position;
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  if ((hi - lo).maxCoeff() < 1e-12) throw Error("root_box: degenerate cloud (all points coincide)");
  box.min_corner = lo - Vec3::Constant(kBoxEpsilon);
  box.max_corner = hi + Vec3::Constant(kBoxEpsilon);
  return box;
}

void save_cloud(const WorldPointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_cloud: cannot open " + path.string());
  io::write_magic(os, kCloudMagic);
  io::write_scalar<std::uint32_t>(os, kCloudVersion);
  io::write_scalar<std::uint64_t>(os, cloud.points.size());
  for (const OrientedPoint& p : cloud.points) {
    for (int i = 0; i < 3; ++i) io::write_scalar<float>(os, static_cast<float>(p.position[i]));
    for (int i = 0; i < 3; ++i) io::write_scalar<float>(os, static_cast<float>(p.normal[i]));
    for (int i = 0; i < 3; ++i)
      io::write_scalar<std::uint8_t>(
          os, static_cast<std::uint8_t>(std::lround(std::clamp(p.color[i], 0.0, 1.0) * 255.0)));
  }
  if (!os) throw Error("save_cloud: write failed for " + path.string());
}

WorldPointCloud load_cloud(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_cloud: cannot open " + path.string());
  io::expect_magic(is, kCloudMagic, "point cloud file");
  const auto version = io::read_scalar<std::uint32_t>(is, "cloud version");
  if (version != kCloudVersion) throw Error("load_cloud: unsupported version");
  const auto count = io::read_scalar<std::uint64_t>(is, "cloud point count");
  WorldPointCloud cloud;
  cloud.points.resize(count);
  cloud.provenance.assign(count, {});
  for (std::uint64_t i = 0; i < count; ++i) {
    OrientedPoint& p = cloud.points[i];
    for (int j = 0; j < 3; ++j) p.position[j] = io::read_scalar<float>(is, "cloud position");
    for (int j = 0; j < 3; ++j) p.normal[j] = io::read_scalar<float>(is, "cloud normal");
    for (int j = 0; j < 3; ++j)
      p.color[j] = io::read_scalar<std::uint8_t>(is, "cloud color") / 255.0;
  }
  return cloud;
}

void export_ply(const WorldPointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("export_ply: cannot open " + path.string());
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
     << "\nproperty float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (const OrientedPoint& p : cloud.points) {
    os << static_cast<float>(p.position.x()) << ' ' << static_cast<float>(p.position.y()) << ' '
       << static_cast<float>(p.position.z()) << ' ' << static_cast<float>(p.normal.x()) << ' '
       << static_cast<float>(p.normal.y()) << ' ' << static_cast<float>(p.normal.z());
    for (int i = 0; i < 3; ++i)
      os << ' ' << std::lround(std::clamp(p.color[i], 0.0, 1.0) * 255.0);
    os << '\n';
  }
  if (!os) throw Error("export_ply: write failed for " + path.string());
}

}  // namespace nrt
