#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/image.hpp"
#include "nrt/synth_scene.hpp"

namespace nrt {

// Single-format helpers. PPM/PGM are the binary (P6/P5) variants; depth is a
// small header plus float32 meters row-major; poses are 4x4 row-major text.
void save_ppm(const ColorImage& image, const std::filesystem::path& path);
ColorImage load_ppm(const std::filesystem::path& path);
void save_pgm(const MaskImage& image, const std::filesystem::path& path);
MaskImage load_pgm(const std::filesystem::path& path);
void save_depth(const DepthImage& depth, const std::filesystem::path& path);
DepthImage load_depth(const std::filesystem::path& path);
void save_pose_txt(const SE3Pose& pose, const std::filesystem::path& path);
SE3Pose load_pose_txt(const std::filesystem::path& path);
void save_intrinsics(const CameraIntrinsics& intr, const std::filesystem::path& path);
CameraIntrinsics load_intrinsics(const std::filesystem::path& path);

void save_scene_json(const SceneSpec& spec, const std::filesystem::path& path);
SceneSpec load_scene_json(const std::filesystem::path& path);

struct DatasetFrame {
  ColorImage color;
  DepthImage depth;
  MaskImage mask;  // empty unless the frame has one on disk
  SE3Pose pose;
  bool has_mask = false;
};

struct Dataset {
  CameraIntrinsics intrinsics;
  SceneSpec scene;
  bool has_scene = false;
  std::vector<DatasetFrame> frames;
};

// Directory layout: intrinsics.txt, optional scene.json, and per frame
// color_%06d.ppm, depth_%06d.bin, pose_%06d.txt, optional mask_%06d.pgm.
void save_dataset_frame(const std::filesystem::path& dir, int index, const ColorImage& color,
                        const DepthImage& depth, const SE3Pose& pose,
                        const MaskImage* mask = nullptr);
void save_rendered_dataset(const std::filesystem::path& dir, const CameraIntrinsics& intr,
                           const SceneSpec& scene, std::span<const RenderedFrame> frames,
                           bool with_masks);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace nrt
