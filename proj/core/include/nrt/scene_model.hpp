#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/image.hpp"

namespace nrt {

// Fused map of the training sequence. Provenance tracks the first frame/pixel
// that contributed to each retained point; loaders that cannot recover it
// (the binary cloud format stores geometry only) fill it with -1.
struct WorldPointCloud {
  struct Provenance {
    int frame = -1;
    int u = -1, v = -1;
  };
  std::vector<OrientedPoint> points;
  std::vector<Provenance> provenance;
};

enum class BoxStrategy { kOriginal, kRot30, kRot60, kCompact };

std::string_view to_string(BoxStrategy s);
BoxStrategy box_strategy_from_string(std::string_view name);

// Oriented bounding box of the scene. Corners live in the box frame:
// p_box = frame_rotation * p_world. Identity rotation for the axis-aligned
// strategy; rot30/rot60 record the applied world rotation; compact records
// the PCA alignment. Corners are inflated by a small epsilon so boundary
// points stay strictly inside.
struct RootBox {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Zero();
  Mat3 frame_rotation = Mat3::Identity();

  Vec3 to_box_frame(const Vec3& world) const { return frame_rotation * world; }
  Vec3 extent() const { return max_corner - min_corner; }
  double volume() const { return extent().prod(); }
};

struct FuseFrame {
  const ColorImage* color = nullptr;  // optional; missing color fuses as black
  const DepthImage* depth = nullptr;
  SE3Pose pose;  // camera-to-world
  CameraIntrinsics intrinsics;
};

// Backprojects every valid pixel, estimates camera-space normals, transforms
// to world space and deduplicates on a voxel grid of the given cell size.
// Retained points are voxel averages; output order is first-touch voxel order
// and therefore deterministic for fixed inputs.
WorldPointCloud fuse(std::span<const FuseFrame> frames, double voxel = 0.01, int threads = 1,
                     int normal_k = 17);

RootBox root_box(const WorldPointCloud& cloud, BoxStrategy strategy);

void save_cloud(const WorldPointCloud& cloud, const std::filesystem::path& path);
WorldPointCloud load_cloud(const std::filesystem::path& path);
void export_ply(const WorldPointCloud& cloud, const std::filesystem::path& path);

}  // namespace nrt
