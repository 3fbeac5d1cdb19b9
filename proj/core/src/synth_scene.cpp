#include "nrt/synth_scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>

#include "nrt/error.hpp"
#include "nrt/rng.hpp"

namespace nrt {

std::string to_string(Dynamics d) {
  switch (d) {
    case Dynamics::kStatic: return "static";
    case Dynamics::kMoved: return "moved";
    case Dynamics::kInserted: return "inserted";
    case Dynamics::kRemoved: return "removed";
  }
  throw Error("to_string: bad Dynamics value");
}

Dynamics dynamics_from_string(const std::string& name) {
  if (name == "static") return Dynamics::kStatic;
  if (name == "moved") return Dynamics::kMoved;
  if (name == "inserted") return Dynamics::kInserted;
  if (name == "removed") return Dynamics::kRemoved;
  throw Error("unknown dynamics: " + name);
}

int SceneSpec::dynamic_count() const {
  int n = 0;
  for (const BoxPrimitive& b : boxes)
    if (b.dynamics != Dynamics::kStatic) ++n;
  return n;
}

CameraIntrinsics default_intrinsics() {
  CameraIntrinsics intr;
  intr.fx = intr.fy = 100;
  intr.cx = 80;
  intr.cy = 60;
  intr.width = 160;
  intr.height = 120;
  return intr;
}

namespace {

constexpr double kRayEps = 1e-9;

double uni(std::mt19937_64& rng, double a, double b) {
  return a + (b - a) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

Vec3 random_color(std::mt19937_64& rng) {
  return {uni(rng, 0.15, 0.9), uni(rng, 0.15, 0.9), uni(rng, 0.15, 0.9)};
}

// One box as placed in a concrete phase.
struct PlacedBox {
  Vec3 min, max;
  const BoxPrimitive* box;
  int id;  // index into spec.boxes
};

std::vector<PlacedBox> placed_boxes(const SceneSpec& spec, RenderPhase phase) {
  std::vector<PlacedBox> out;
  for (std::size_t i = 0; i < spec.boxes.size(); ++i) {
    const BoxPrimitive& b = spec.boxes[i];
    Vec3 offset = Vec3::Zero();
    if (phase == RenderPhase::kTrain) {
      if (b.dynamics == Dynamics::kInserted) continue;
    } else {
      if (b.dynamics == Dynamics::kRemoved) continue;
      if (b.dynamics == Dynamics::kMoved) offset = b.test_offset;
    }
    out.push_back({b.min_corner + offset, b.max_corner + offset, &b, static_cast<int>(i)});
  }
  return out;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int primitive = -2;  // -1 shell wall, >= 0 box index, -2 nothing
  int face = -1;       // -x,+x,-y,+y,-z,+z
};

// Slab test. Rays starting inside the box report the exit face (needed when
// comparing against train geometry the camera is allowed to stand in).
bool intersect_box(const Vec3& o, const Vec3& d, const Vec3& bmin, const Vec3& bmax, double* t,
                   int* face) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int entry_face = -1, exit_face = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < bmin[a] || o[a] > bmax[a]) return false;
      continue;
    }
    double near = (bmin[a] - o[a]) / d[a];
    double far = (bmax[a] - o[a]) / d[a];
    int near_face = 2 * a, far_face = 2 * a + 1;
    if (near > far) {
      std::swap(near, far);
      std::swap(near_face, far_face);
    }
    if (near > t0) {
      t0 = near;
      entry_face = near_face;
    }
    if (far < t1) {
      t1 = far;
      exit_face = far_face;
    }
  }
  if (t0 > t1) return false;
  if (t0 > kRayEps) {
    *t = t0;
    *face = entry_face;
    return true;
  }
  if (t1 > kRayEps) {
    *t = t1;  // origin inside
    *face = exit_face;
    return true;
  }
  return false;
}

// First surface along the ray: nearest box entry, else the shell wall the
// ray exits through.
Hit cast_ray(const SceneSpec& spec, std::span<const PlacedBox> boxes, const Vec3& o,
             const Vec3& d) {
  Hit hit;
  for (const PlacedBox& pb : boxes) {
    double t;
    int face;
    if (intersect_box(o, d, pb.min, pb.max, &t, &face) && t < hit.t)
      hit = {t, pb.id, face};
  }
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) continue;
    const double wall = d[a] > 0 ? spec.room_max[a] : spec.room_min[a];
    const double t = (wall - o[a]) / d[a];
    if (t > kRayEps && t < hit.t) hit = {t, -1, 2 * a + (d[a] > 0 ? 1 : 0)};
  }
  return hit;
}

std::array<std::uint8_t, 3> shade(const Vec3& base, double illumination) {
  std::array<std::uint8_t, 3> out;
  for (int c = 0; c < 3; ++c) {
    const double v = std::clamp(base[c] * illumination, 0.0, 1.0);
    out[c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

bool inside_any(std::span<const PlacedBox> boxes, const Vec3& p, double inflate) {
  for (const PlacedBox& b : boxes)
    if ((p.array() >= b.min.array() - inflate).all() && (p.array() <= b.max.array() + inflate).all())
      return true;
  return false;
}

}  // namespace

SceneSpec generate_scene(std::uint64_t seed, int complexity) {
  SceneSpec spec;
  spec.seed = seed;
  auto rng = make_rng(seed, 0x7363656e65ull);
  for (Vec3& c : spec.shell_colors) c = random_color(rng);
  if (complexity <= 0) return spec;

  const double margin = 0.1;
  for (int i = 0; i < complexity; ++i) {
    BoxPrimitive b;
    Vec3 size{uni(rng, 0.2, 0.8), uni(rng, 0.2, 0.8), uni(rng, 0.2, 0.8)};
    for (int a = 0; a < 3; ++a) {
      const double lo = spec.room_min[a] + margin;
      const double hi = spec.room_max[a] - margin - size[a];
      b.min_corner[a] = uni(rng, lo, std::max(lo, hi));
      b.max_corner[a] = b.min_corner[a] + size[a];
    }
    for (Vec3& c : b.face_colors) c = random_color(rng);
    spec.boxes.push_back(b);
  }

  const int n_dynamic = std::clamp(complexity * 3 / 8, 1, complexity);
  std::vector<int> order(spec.boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const Dynamics kinds[3] = {Dynamics::kMoved, Dynamics::kInserted, Dynamics::kRemoved};
  for (int k = 0; k < n_dynamic; ++k) {
    BoxPrimitive& b = spec.boxes[order[k]];
    b.dynamics = kinds[k % 3];
    if (b.dynamics != Dynamics::kMoved) continue;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Vec3 delta{uni(rng, -0.8, 0.8), uni(rng, -0.8, 0.8), uni(rng, -0.3, 0.3)};
      if (delta.norm() < 0.3) continue;
      const Vec3 lo = b.min_corner + delta;
      const Vec3 hi = b.max_corner + delta;
      if ((lo.array() >= spec.room_min.array() + 0.05).all() &&
          (hi.array() <= spec.room_max.array() - 0.05).all()) {
        b.test_offset = delta;
        placed = true;
      }
    }
    if (!placed) {
      // Slide toward the room center; the box starts at least `margin` off
      // the walls so this always stays inside.
      const Vec3 center = 0.5 * (spec.room_min + spec.room_max);
      const Vec3 toward = center - 0.5 * (b.min_corner + b.max_corner);
      b.test_offset = 0.3 * (toward.norm() > 1e-9 ? toward.normalized() : Vec3::UnitX());
    }
  }
  return spec;
}

RenderedFrame render(const SceneSpec& spec, const SE3Pose& pose, const CameraIntrinsics& intr,
                     RenderPhase phase, const RenderOptions& opts) {
  intr.validate();
  const std::vector<PlacedBox> boxes = placed_boxes(spec, phase);
  const Vec3 origin = pose.translation();
  if ((origin.array() <= spec.room_min.array()).any() ||
      (origin.array() >= spec.room_max.array()).any() || inside_any(boxes, origin, 0.0))
    throw Error("render: invalid viewpoint (inside a primitive or outside the shell)");

  const bool test_phase = phase == RenderPhase::kTest;
  std::vector<PlacedBox> train_boxes;
  if (test_phase) train_boxes = placed_boxes(spec, RenderPhase::kTrain);

  RenderedFrame frame;
  frame.color = ColorImage(intr.width, intr.height);
  frame.depth = DepthImage(intr.width, intr.height);
  frame.mask = MaskImage(intr.width, intr.height);
  frame.pose = pose;
  frame.intrinsics = intr;

  std::mt19937_64 noise_rng = make_rng(opts.noise_seed, 0x6e6f697365ull);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int v = 0; v < intr.height; ++v) {
    for (int u = 0; u < intr.width; ++u) {
      // z = 1 makes the ray parameter equal the pinhole depth directly.
      const Vec3 dir_cam{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
      const Vec3 dir = pose.rotate(dir_cam);
      const Hit hit = cast_ray(spec, boxes, origin, dir);
      if (hit.primitive == -2) continue;  // cannot happen inside a closed shell

      const Vec3& base = hit.primitive < 0 ? spec.shell_colors[hit.face]
                                           : spec.boxes[hit.primitive].face_colors[hit.face];
      frame.color.at(u, v) = shade(base, opts.illumination);
      double depth = hit.t;
      if (opts.depth_noise_sigma > 0)
        depth = std::max(1e-4, depth + opts.depth_noise_sigma * noise(noise_rng));
      frame.depth.at(u, v) = depth;

      if (test_phase) {
        const Hit train_hit = cast_ray(spec, train_boxes, origin, dir);
        const bool same = train_hit.primitive == hit.primitive && train_hit.face == hit.face &&
                          std::abs(train_hit.t - hit.t) < 1e-9;
        frame.mask.at(u, v) = same ? 0 : 255;
      }
    }
  }
  return frame;
}

std::vector<SE3Pose> generate_trajectory(const SceneSpec& spec, int n_frames,
                                         std::uint64_t seed) {
  if (n_frames < 1) throw Error("generate_trajectory: need at least one frame");
  auto rng = make_rng(seed, 0x74726a656374ull);

  // Collision geometry: every placement a box takes in either phase.
  std::vector<PlacedBox> solids = placed_boxes(spec, RenderPhase::kTrain);
  for (const PlacedBox& pb : placed_boxes(spec, RenderPhase::kTest)) solids.push_back(pb);

  const double wall_margin = 0.25;
  const Vec3 lo = spec.room_min + Vec3::Constant(wall_margin);
  const Vec3 hi = spec.room_max - Vec3::Constant(wall_margin);
  if ((hi.array() <= lo.array()).any())
    throw Error("generate_trajectory: room too small for the wall margin");
  auto free_space = [&](const Vec3& p) {
    return (p.array() > lo.array()).all() && (p.array() < hi.array()).all() &&
           !inside_any(solids, p, 0.1);
  };

  const Vec3 center = 0.5 * (spec.room_min + spec.room_max);
  Vec3 target = center;
  Vec3 pos;
  bool found = false;
  for (int attempt = 0; attempt < 2000 && !found; ++attempt) {
    pos = center + Vec3{uni(rng, -1.2, 1.2), uni(rng, -0.9, 0.9), uni(rng, -0.5, 0.5)};
    found = free_space(pos) && (pos - target).head<2>().norm() > 0.5;
  }
  if (!found) throw Error("generate_trajectory: cannot find a free viewpoint");

  auto look_at = [](const Vec3& p, const Vec3& t) {
    const Vec3 f = (t - p).normalized();
    Vec3 x = f.cross(Vec3::UnitZ());
    if (x.norm() < 1e-6) x = f.cross(Vec3::UnitY());
    x.normalize();
    const Vec3 y = f.cross(x);  // image v axis, pointing downward in world
    Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = f;
    return SE3Pose(r, p);
  };

  std::vector<SE3Pose> poses;
  poses.reserve(n_frames);
  poses.push_back(look_at(pos, target));

  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 step = Vec3::Zero();
  // Circulation drift: a pure diffusion walk lingers near its start, so a
  // training split shot that way covers one side of the room and leaves the
  // rest of the scene unlearnable for any independently drawn test walk. A
  // tangential pull around the room center (plus weak springs toward a
  // comfortable orbit radius and the center height) makes the walk lap the
  // room while the noise keeps it irregular.
  const double spin = (rng() & 1) ? 1.0 : -1.0;
  const double orbit_r =
      0.35 * std::min(spec.room_max[0] - spec.room_min[0], spec.room_max[1] - spec.room_min[1]);
  for (int i = 1; i < n_frames; ++i) {
    const Vec3 radial = pos - center;
    const double r = radial.head<2>().norm();
    const Vec3 rdir = r > 1e-6 ? Vec3(radial[0] / r, radial[1] / r, 0) : Vec3::UnitX();
    const Vec3 tangent = spin * Vec3(-rdir[1], rdir[0], 0);
    const Vec3 drift = 0.018 * tangent - 0.010 * std::clamp(r - orbit_r, -0.5, 0.5) * rdir -
                       Vec3(0, 0, 0.008 * radial[2]);
    Vec3 cand_step = 0.85 * step + drift + 0.012 * Vec3{gauss(rng), gauss(rng), 0.4 * gauss(rng)};
    if (cand_step.norm() > 0.07) cand_step *= 0.07 / cand_step.norm();
    Vec3 tstep{0.015 * gauss(rng), 0.015 * gauss(rng), 0.008 * gauss(rng)};

    SE3Pose pose = poses.back();
    Vec3 accepted_pos = pos;
    Vec3 accepted_target = target;
    Vec3 accepted_step = Vec3::Zero();
    for (int shrink = 0; shrink < 24; ++shrink) {
      const double s = std::pow(0.5, shrink);
      const Vec3 p2 = pos + s * cand_step;
      Vec3 t2 = target + s * tstep;
      t2 = t2.cwiseMax(center - Vec3{1.0, 0.7, 0.5}).cwiseMin(center + Vec3{1.0, 0.7, 0.5});
      if (!free_space(p2) || (t2 - p2).norm() < 0.6 || (t2 - p2).head<2>().norm() < 0.35)
        continue;
      const SE3Pose cand = look_at(p2, t2);
      const PoseError err = pose_error(cand, poses.back());
      if (err.translation_m < 0.095 && err.rotation_deg < 9.5) {
        pose = cand;
        accepted_pos = p2;
        accepted_target = t2;
        accepted_step = s * cand_step;
        break;
      }
    }
    pos = accepted_pos;
    target = accepted_target;
    step = accepted_step;  // zero when every shrink failed: pose repeats
    poses.push_back(pose);
  }
  return poses;
}

}  // namespace nrt
