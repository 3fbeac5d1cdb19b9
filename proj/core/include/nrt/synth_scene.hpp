#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/image.hpp"

namespace nrt {

// What happens to a primitive between the train and test sequence.
enum class Dynamics { kStatic, kMoved, kInserted, kRemoved };

std::string to_string(Dynamics d);
Dynamics dynamics_from_string(const std::string& name);

// Axis-aligned colored box. Face order: -x, +x, -y, +y, -z, +z.
struct BoxPrimitive {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Zero();
  std::array<Vec3, 6> face_colors{};
  Dynamics dynamics = Dynamics::kStatic;
  Vec3 test_offset = Vec3::Zero();  // kMoved: translation applied at test time

  bool contains(const Vec3& p) const {
    return (p.array() >= min_corner.array()).all() && (p.array() <= max_corner.array()).all();
  }
};

// Room shell (rays hit its walls from inside) plus boxes. z is up.
struct SceneSpec {
  Vec3 room_min = Vec3::Zero();
  Vec3 room_max = Vec3(4.0, 3.0, 2.5);
  std::array<Vec3, 6> shell_colors{};
  std::vector<BoxPrimitive> boxes;
  std::uint64_t seed = 0;

  int dynamic_count() const;
};

enum class RenderPhase { kTrain, kTest };

struct RenderOptions {
  double illumination = 1.0;       // scales face colors (visual-change knob)
  double depth_noise_sigma = 0.0;  // meters, gaussian, 0 disables
  std::uint64_t noise_seed = 0;
};

struct RenderedFrame {
  ColorImage color;
  DepthImage depth;
  MaskImage mask;  // test phase: surface differs from the train geometry
  SE3Pose pose;
  CameraIntrinsics intrinsics;
};

// Deterministic procedural room. complexity = box count; a share of the
// boxes (3 of 8 up to 5 of 15) is marked dynamic, cycling moved / inserted /
// removed. complexity 0 gives the bare shell.
SceneSpec generate_scene(std::uint64_t seed, int complexity = 12);

// Ray-cast RGB-D of the phase geometry. Depth is the camera-z of the nearest
// hit, exact up to floating-point rounding. Test-phase masks flag pixels
// whose first hit (primitive, face, distance) differs from the train
// geometry along the same ray. Throws when the pose sits inside a primitive
// or outside the shell.
RenderedFrame render(const SceneSpec& spec, const SE3Pose& pose, const CameraIntrinsics& intr,
                     RenderPhase phase, const RenderOptions& opts = {});

// Smooth collision-free random walk with look-at orientations; consecutive
// poses differ by less than 0.1 m and 10 degrees.
std::vector<SE3Pose> generate_trajectory(const SceneSpec& spec, int n_frames,
                                         std::uint64_t seed);

CameraIntrinsics default_intrinsics();  // 160x120, fx = fy = 100

}  // namespace nrt
