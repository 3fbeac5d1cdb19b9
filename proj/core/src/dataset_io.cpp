#include "nrt/dataset_io.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "nrt/binary_io.hpp"
#include "nrt/error.hpp"

namespace nrt {

namespace {

constexpr char kDepthMagic[4] = {'N', 'R', 'D', 'P'};
constexpr std::uint32_t kDepthVersion = 1;

std::ofstream open_out(const std::filesystem::path& path, bool binary) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw Error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path, bool binary) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw Error("cannot open: " + path.string());
  return is;
}

// Next whitespace-delimited token, skipping '#' comment lines (netpbm).
std::string pnm_token(std::istream& is) {
  std::string tok;
  for (;;) {
    const int c = is.get();
    if (c == EOF) {
      if (tok.empty()) throw Error("truncated netpbm header");
      return tok;
    }
    if (c == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
}

std::pair<int, int> pnm_header(std::istream& is, const char* magic, const char* what) {
  if (pnm_token(is) != magic) throw Error(std::string(what) + ": bad magic");
  const int w = std::stoi(pnm_token(is));
  const int h = std::stoi(pnm_token(is));
  const int maxval = std::stoi(pnm_token(is));
  if (w <= 0 || h <= 0 || maxval != 255)
    throw Error(std::string(what) + ": unsupported dimensions or depth");
  return {w, h};
}

std::filesystem::path frame_path(const std::filesystem::path& dir, const char* stem, int index,
                                 const char* ext) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%06d.%s", stem, index, ext);
  return dir / name;
}

}  // namespace

void save_ppm(const ColorImage& image, const std::filesystem::path& path) {
  auto os = open_out(path, true);
  os << "P6\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.data.data()),
           static_cast<std::streamsize>(image.data.size() * 3));
  if (!os) throw Error("save_ppm: write failed for " + path.string());
}

ColorImage load_ppm(const std::filesystem::path& path) {
  auto is = open_in(path, true);
  const auto [w, h] = pnm_header(is, "P6", "load_ppm");
  ColorImage image(w, h);
  is.read(reinterpret_cast<char*>(image.data.data()),
          static_cast<std::streamsize>(image.data.size() * 3));
  if (!is) throw Error("load_ppm: truncated pixel data in " + path.string());
  return image;
}

void save_pgm(const MaskImage& image, const std::filesystem::path& path) {
  auto os = open_out(path, true);
  os << "P5\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.data.data()),
           static_cast<std::streamsize>(image.data.size()));
  if (!os) throw Error("save_pgm: write failed for " + path.string());
}

MaskImage load_pgm(const std::filesystem::path& path) {
  auto is = open_in(path, true);
  const auto [w, h] = pnm_header(is, "P5", "load_pgm");
  MaskImage image(w, h);
  is.read(reinterpret_cast<char*>(image.data.data()),
          static_cast<std::streamsize>(image.data.size()));
  if (!is) throw Error("load_pgm: truncated pixel data in " + path.string());
  return image;
}

void save_depth(const DepthImage& depth, const std::filesystem::path& path) {
  auto os = open_out(path, true);
  io::write_magic(os, kDepthMagic);
  io::write_scalar<std::uint32_t>(os, kDepthVersion);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(depth.width));
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(depth.height));
  for (double d : depth.data) io::write_scalar<float>(os, static_cast<float>(d));
  if (!os) throw Error("save_depth: write failed for " + path.string());
}

DepthImage load_depth(const std::filesystem::path& path) {
  auto is = open_in(path, true);
  io::expect_magic(is, kDepthMagic, "depth file");
  if (io::read_scalar<std::uint32_t>(is, "depth version") != kDepthVersion)
    throw Error("load_depth: unsupported version in " + path.string());
  const int w = static_cast<int>(io::read_scalar<std::uint32_t>(is, "depth width"));
  const int h = static_cast<int>(io::read_scalar<std::uint32_t>(is, "depth height"));
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16)
    throw Error("load_depth: implausible dimensions in " + path.string());
  DepthImage depth(w, h);
  for (double& d : depth.data) d = io::read_scalar<float>(is, "depth pixel");
  return depth;
}

void save_pose_txt(const SE3Pose& pose, const std::filesystem::path& path) {
  auto os = open_out(path, false);
  const Mat3& r = pose.rotation();
  const Vec3& t = pose.translation();
  char line[256];
  for (int i = 0; i < 3; ++i) {
    std::snprintf(line, sizeof(line), "%.17g %.17g %.17g %.17g\n", r(i, 0), r(i, 1), r(i, 2),
                  t(i));
    os << line;
  }
  os << "0 0 0 1\n";
  if (!os) throw Error("save_pose_txt: write failed for " + path.string());
}

SE3Pose load_pose_txt(const std::filesystem::path& path) {
  auto is = open_in(path, false);
  Mat3 r;
  Vec3 t;
  double row4[4];
  for (int i = 0; i < 3; ++i) {
    if (!(is >> r(i, 0) >> r(i, 1) >> r(i, 2) >> t(i)))
      throw Error("load_pose_txt: malformed matrix in " + path.string());
  }
  if (!(is >> row4[0] >> row4[1] >> row4[2] >> row4[3]))
    throw Error("load_pose_txt: missing fourth row in " + path.string());
  return SE3Pose(r, t);
}

void save_intrinsics(const CameraIntrinsics& intr, const std::filesystem::path& path) {
  auto os = open_out(path, false);
  char line[256];
  std::snprintf(line, sizeof(line), "%.17g %.17g %.17g %.17g %d %d\n", intr.fx, intr.fy, intr.cx,
                intr.cy, intr.width, intr.height);
  os << line;
  if (!os) throw Error("save_intrinsics: write failed for " + path.string());
}

CameraIntrinsics load_intrinsics(const std::filesystem::path& path) {
  auto is = open_in(path, false);
  CameraIntrinsics intr;
  if (!(is >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >> intr.height))
    throw Error("load_intrinsics: malformed file " + path.string());
  intr.validate();
  return intr;
}

namespace {

nlohmann::json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 vec3_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("scene json: expected 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void save_scene_json(const SceneSpec& spec, const std::filesystem::path& path) {
  nlohmann::json j;
  j["room_min"] = vec3_json(spec.room_min);
  j["room_max"] = vec3_json(spec.room_max);
  j["seed"] = spec.seed;
  for (const Vec3& c : spec.shell_colors) j["shell_colors"].push_back(vec3_json(c));
  j["boxes"] = nlohmann::json::array();
  for (const BoxPrimitive& b : spec.boxes) {
    nlohmann::json jb;
    jb["min"] = vec3_json(b.min_corner);
    jb["max"] = vec3_json(b.max_corner);
    for (const Vec3& c : b.face_colors) jb["face_colors"].push_back(vec3_json(c));
    jb["dynamics"] = to_string(b.dynamics);
    jb["test_offset"] = vec3_json(b.test_offset);
    j["boxes"].push_back(jb);
  }
  auto os = open_out(path, false);
  os << j.dump(2) << "\n";
  if (!os) throw Error("save_scene_json: write failed for " + path.string());
}

SceneSpec load_scene_json(const std::filesystem::path& path) {
  auto is = open_in(path, false);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("load_scene_json: " + path.string() + ": " + e.what());
  }
  SceneSpec spec;
  spec.room_min = vec3_from(j.at("room_min"));
  spec.room_max = vec3_from(j.at("room_max"));
  spec.seed = j.at("seed").get<std::uint64_t>();
  const auto& shell = j.at("shell_colors");
  if (shell.size() != 6) throw Error("load_scene_json: expected 6 shell colors");
  for (int i = 0; i < 6; ++i) spec.shell_colors[i] = vec3_from(shell[i]);
  for (const auto& jb : j.at("boxes")) {
    BoxPrimitive b;
    b.min_corner = vec3_from(jb.at("min"));
    b.max_corner = vec3_from(jb.at("max"));
    const auto& faces = jb.at("face_colors");
    if (faces.size() != 6) throw Error("load_scene_json: expected 6 face colors");
    for (int i = 0; i < 6; ++i) b.face_colors[i] = vec3_from(faces[i]);
    b.dynamics = dynamics_from_string(jb.at("dynamics").get<std::string>());
    b.test_offset = vec3_from(jb.at("test_offset"));
    spec.boxes.push_back(b);
  }
  return spec;
}

void save_dataset_frame(const std::filesystem::path& dir, int index, const ColorImage& color,
                        const DepthImage& depth, const SE3Pose& pose, const MaskImage* mask) {
  save_ppm(color, frame_path(dir, "color", index, "ppm"));
  save_depth(depth, frame_path(dir, "depth", index, "bin"));
  save_pose_txt(pose, frame_path(dir, "pose", index, "txt"));
  if (mask) save_pgm(*mask, frame_path(dir, "mask", index, "pgm"));
}

void save_rendered_dataset(const std::filesystem::path& dir, const CameraIntrinsics& intr,
                           const SceneSpec& scene, std::span<const RenderedFrame> frames,
                           bool with_masks) {
  std::filesystem::create_directories(dir);
  save_intrinsics(intr, dir / "intrinsics.txt");
  save_scene_json(scene, dir / "scene.json");
  for (std::size_t i = 0; i < frames.size(); ++i)
    save_dataset_frame(dir, static_cast<int>(i), frames[i].color, frames[i].depth, frames[i].pose,
                       with_masks ? &frames[i].mask : nullptr);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw Error("load_dataset: not a directory: " + dir.string());
  Dataset ds;
  ds.intrinsics = load_intrinsics(dir / "intrinsics.txt");
  if (std::filesystem::exists(dir / "scene.json")) {
    ds.scene = load_scene_json(dir / "scene.json");
    ds.has_scene = true;
  }
  for (int i = 0;; ++i) {
    const auto depth_file = frame_path(dir, "depth", i, "bin");
    if (!std::filesystem::exists(depth_file)) break;
    DatasetFrame frame;
    frame.depth = load_depth(depth_file);
    frame.color = load_ppm(frame_path(dir, "color", i, "ppm"));
    frame.pose = load_pose_txt(frame_path(dir, "pose", i, "txt"));
    const auto mask_file = frame_path(dir, "mask", i, "pgm");
    if (std::filesystem::exists(mask_file)) {
      frame.mask = load_pgm(mask_file);
      frame.has_mask = true;
    }
    if (frame.color.width != frame.depth.width || frame.color.height != frame.depth.height ||
        (frame.has_mask &&
         (frame.mask.width != frame.depth.width || frame.mask.height != frame.depth.height)))
      throw Error("load_dataset: raster size mismatch in frame " + std::to_string(i));
    ds.frames.push_back(std::move(frame));
  }
  if (ds.frames.empty()) throw Error("load_dataset: no frames found in " + dir.string());
  return ds;
}

}  // namespace nrt
