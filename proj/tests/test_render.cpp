#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <vector>

#include "nrt/error.hpp"
#include "nrt/geometry.hpp"
#include "nrt/synth_scene.hpp"

using namespace nrt;

namespace {

SE3Pose look_at(const Vec3& p, const Vec3& target) {
  const Vec3 f = (target - p).normalized();
  Vec3 x = f.cross(Vec3::UnitZ());
  if (x.norm() < 1e-6) x = f.cross(Vec3::UnitY());
  x.normalize();
  Mat3 r;
  r.col(0) = x;
  r.col(1) = f.cross(x);
  r.col(2) = f;
  return SE3Pose(r, p);
}

// Box placement per phase, mirroring the render semantics: inserted boxes
// exist only at test, removed only at train, moved boxes shift at test.
struct Placed {
  Vec3 lo, hi;
};

std::vector<Placed> placements(const SceneSpec& spec, RenderPhase phase) {
  std::vector<Placed> out;
  for (const BoxPrimitive& b : spec.boxes) {
    Vec3 offset = Vec3::Zero();
    if (phase == RenderPhase::kTrain) {
      if (b.dynamics == Dynamics::kInserted) continue;
    } else {
      if (b.dynamics == Dynamics::kRemoved) continue;
      if (b.dynamics == Dynamics::kMoved) offset = b.test_offset;
    }
    out.push_back({b.min_corner + offset, b.max_corner + offset});
  }
  return out;
}

// Distance from a point to the nearest primitive surface of the phase
// geometry (room walls or box boundary).
double surface_distance(const SceneSpec& spec, RenderPhase phase, const Vec3& p) {
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    best = std::min(best, std::abs(p[a] - spec.room_min[a]));
    best = std::min(best, std::abs(spec.room_max[a] - p[a]));
  }
  for (const Placed& b : placements(spec, phase)) {
    const Vec3 center = 0.5 * (b.lo + b.hi);
    const Vec3 half = 0.5 * (b.hi - b.lo);
    const Vec3 q = (p - center).cwiseAbs() - half;
    const double outside = q.cwiseMax(0.0).norm();
    const double inside = std::min(q.maxCoeff(), 0.0);
    best = std::min(best, std::abs(outside + inside));
  }
  return best;
}

bool same_pixel(const ColorImage& a, const ColorImage& b, int u, int v) {
  return a.at(u, v) == b.at(u, v);
}

}  // namespace

TEST_CASE("frontal wall renders the analytic plane distance") {
  const SceneSpec spec = generate_scene(4, 0);  // bare shell
  // Camera at the room center looking straight at the +x wall, 2 m away.
  const SE3Pose pose = look_at(Vec3(2.0, 1.5, 1.25), Vec3(4.0, 1.5, 1.25));
  const CameraIntrinsics intr = default_intrinsics();
  const RenderedFrame frame = render(spec, pose, intr, RenderPhase::kTrain);

  // Central block: every ray still hits the facing wall; depth is the
  // camera-z of the hit, which for a frontal plane is the plane distance at
  // every pixel.
  for (int v = 40; v < 80; ++v)
    for (int u = 60; u < 100; ++u) CHECK(frame.depth.at(u, v) == doctest::Approx(2.0).epsilon(1e-9));

  // The wall's flat color arrives unshaded at illumination 1.
  std::array<std::uint8_t, 3> expect;
  for (int c = 0; c < 3; ++c)
    expect[c] = static_cast<std::uint8_t>(std::lround(spec.shell_colors[1][c] * 255.0));
  CHECK(frame.color.at(80, 60) == expect);
}

TEST_CASE("backprojected pixels land on primitive surfaces") {
  const SceneSpec spec = generate_scene(5, 8);
  const std::vector<SE3Pose> poses = generate_trajectory(spec, 3, 2);
  const CameraIntrinsics intr = default_intrinsics();
  for (const SE3Pose& pose : poses) {
    const RenderedFrame frame = render(spec, pose, intr, RenderPhase::kTrain);
    const auto points = backproject(frame.depth, intr);
    REQUIRE(points.size() == static_cast<std::size_t>(intr.width) * intr.height);
    double worst = 0;
    for (std::size_t i = 0; i < points.size(); i += 7) {
      const Vec3 world = pose.apply(points[i].position);
      worst = std::max(worst, surface_distance(spec, RenderPhase::kTrain, world));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("train and test phases differ exactly on masked pixels") {
  const SceneSpec spec = generate_scene(7, 12);
  REQUIRE(spec.dynamic_count() > 0);
  const std::vector<SE3Pose> poses = generate_trajectory(spec, 2, 13);
  const CameraIntrinsics intr = default_intrinsics();

  const RenderedFrame train = render(spec, poses[1], intr, RenderPhase::kTrain);
  const RenderedFrame test = render(spec, poses[1], intr, RenderPhase::kTest);

  int masked = 0;
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) {
      const bool depth_same = train.depth.at(u, v) == test.depth.at(u, v);
      const bool color_same = same_pixel(train.color, test.color, u, v);
      if (test.mask.at(u, v) == 0) {
        // Unmasked: the ray hit the identical surface, so the pixel must
        // match bit for bit.
        CHECK(depth_same);
        CHECK(color_same);
      } else {
        ++masked;
      }
      // Converse: any observable difference must be masked.
      if (!depth_same || !color_same) CHECK(test.mask.at(u, v) == 255);
    }
  CHECK(masked > 0);

  SUBCASE("a fully static scene renders identical phases with an empty mask") {
    SceneSpec frozen = spec;
    for (BoxPrimitive& b : frozen.boxes) b.dynamics = Dynamics::kStatic;
    const RenderedFrame t2 = render(frozen, poses[1], intr, RenderPhase::kTest);
    const RenderedFrame t1 = render(frozen, poses[1], intr, RenderPhase::kTrain);
    for (int v = 0; v < intr.height; ++v)
      for (int u = 0; u < intr.width; ++u) {
        CHECK(t2.mask.at(u, v) == 0);
        CHECK(t1.depth.at(u, v) == t2.depth.at(u, v));
        CHECK(same_pixel(t1.color, t2.color, u, v));
      }
  }
}

TEST_CASE("illumination scales colors, clamps at white, and leaves depth alone") {
  SceneSpec spec = generate_scene(9, 0);
  spec.shell_colors[1] = Vec3(0.9, 0.3, 0.2);  // +x wall
  const SE3Pose pose = look_at(Vec3(2.0, 1.5, 1.25), Vec3(4.0, 1.5, 1.25));
  const CameraIntrinsics intr = default_intrinsics();

  RenderOptions bright;
  bright.illumination = 1.3;
  const RenderedFrame lit = render(spec, pose, intr, RenderPhase::kTrain, bright);
  // 0.9 * 1.3 saturates; the other channels scale linearly.
  const auto px = lit.color.at(80, 60);
  CHECK(px[0] == 255);
  CHECK(px[1] == static_cast<std::uint8_t>(std::lround(0.3 * 1.3 * 255.0)));
  CHECK(px[2] == static_cast<std::uint8_t>(std::lround(0.2 * 1.3 * 255.0)));

  RenderOptions dim;
  dim.illumination = 0.5;
  const RenderedFrame half = render(spec, pose, intr, RenderPhase::kTrain, dim);
  const RenderedFrame full = render(spec, pose, intr, RenderPhase::kTrain);
  for (int v = 0; v < intr.height; v += 5)
    for (int u = 0; u < intr.width; u += 5) {
      CHECK(half.depth.at(u, v) == full.depth.at(u, v));
      for (int c = 0; c < 3; ++c) {
        const double rescaled = full.color.at(u, v)[c] * 0.5;
        CHECK(std::abs(half.color.at(u, v)[c] - rescaled) <= 1.0);  // rounding slack
      }
    }
}

TEST_CASE("depth noise perturbs depth deterministically per seed") {
  const SceneSpec spec = generate_scene(11, 4);
  const SE3Pose pose = generate_trajectory(spec, 1, 3).front();
  const CameraIntrinsics intr = default_intrinsics();

  RenderOptions opts;
  opts.depth_noise_sigma = 0.01;
  opts.noise_seed = 42;
  const RenderedFrame noisy = render(spec, pose, intr, RenderPhase::kTrain, opts);
  const RenderedFrame again = render(spec, pose, intr, RenderPhase::kTrain, opts);
  const RenderedFrame clean = render(spec, pose, intr, RenderPhase::kTrain);

  double max_dev = 0;
  bool any_diff = false;
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) {
      CHECK(noisy.depth.at(u, v) == again.depth.at(u, v));
      const double dev = std::abs(noisy.depth.at(u, v) - clean.depth.at(u, v));
      max_dev = std::max(max_dev, dev);
      if (dev > 0) any_diff = true;
    }
  CHECK(any_diff);
  CHECK(max_dev < 0.01 * 6);  // six sigma
}

TEST_CASE("rendering from inside a primitive or outside the shell throws") {
  SceneSpec spec = generate_scene(13, 0);
  BoxPrimitive b;
  b.min_corner = Vec3(1.0, 1.0, 0.5);
  b.max_corner = Vec3(1.6, 1.8, 1.2);
  b.dynamics = Dynamics::kRemoved;
  spec.boxes.push_back(b);

  const CameraIntrinsics intr = default_intrinsics();
  const SE3Pose outside = look_at(Vec3(-1.0, 1.5, 1.25), Vec3(2.0, 1.5, 1.25));
  CHECK_THROWS_AS(render(spec, outside, intr, RenderPhase::kTrain), Error);

  // Inside the removed box: invalid while it exists (train), free at test.
  const SE3Pose in_box = look_at(Vec3(1.3, 1.4, 0.8), Vec3(3.0, 1.5, 1.0));
  CHECK_THROWS_AS(render(spec, in_box, intr, RenderPhase::kTrain), Error);
  CHECK_NOTHROW(render(spec, in_box, intr, RenderPhase::kTest));

  spec.boxes.back().dynamics = Dynamics::kInserted;
  CHECK_NOTHROW(render(spec, in_box, intr, RenderPhase::kTrain));
  CHECK_THROWS_AS(render(spec, in_box, intr, RenderPhase::kTest), Error);
}

TEST_CASE("generated scenes satisfy their documented invariants") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 40ull, 41ull}) {
    const int complexity = 8 + static_cast<int>(seed % 8);
    const SceneSpec spec = generate_scene(seed, complexity);
    CHECK(spec.boxes.size() == static_cast<std::size_t>(complexity));
    CHECK(spec.dynamic_count() == std::clamp(complexity * 3 / 8, 1, complexity));

    int moved = 0, inserted = 0, removed = 0;
    for (const BoxPrimitive& b : spec.boxes) {
      CHECK((b.max_corner.array() > b.min_corner.array()).all());
      for (int c = 0; c < 6; ++c)
        for (int a = 0; a < 3; ++a) {
          CHECK(b.face_colors[c][a] >= 0.15);
          CHECK(b.face_colors[c][a] <= 0.9);
        }
      moved += b.dynamics == Dynamics::kMoved;
      inserted += b.dynamics == Dynamics::kInserted;
      removed += b.dynamics == Dynamics::kRemoved;
    }
    // Kinds cycle moved / inserted / removed, so the counts split evenly
    // with moved taking any remainder first.
    CHECK(moved >= inserted);
    CHECK(inserted >= removed);
    CHECK(moved - removed <= 1);

    // Both phase placements stay inside the shell.
    for (RenderPhase phase : {RenderPhase::kTrain, RenderPhase::kTest})
      for (const Placed& p : placements(spec, phase)) {
        CHECK((p.lo.array() >= spec.room_min.array()).all());
        CHECK((p.hi.array() <= spec.room_max.array()).all());
      }
  }

  const SceneSpec a = generate_scene(77, 10);
  const SceneSpec b = generate_scene(77, 10);
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].min_corner == b.boxes[i].min_corner);
    CHECK(a.boxes[i].test_offset == b.boxes[i].test_offset);
    CHECK(a.boxes[i].dynamics == b.boxes[i].dynamics);
  }
  CHECK(generate_scene(78, 10).boxes[0].min_corner != a.boxes[0].min_corner);
}

TEST_CASE("trajectories are smooth, collision-free, and seed-deterministic") {
  const SceneSpec spec = generate_scene(3, 10);
  const std::vector<SE3Pose> poses = generate_trajectory(spec, 60, 9);
  REQUIRE(poses.size() == 60);

  std::vector<Placed> solids = placements(spec, RenderPhase::kTrain);
  for (const Placed& p : placements(spec, RenderPhase::kTest)) solids.push_back(p);

  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Vec3 p = poses[i].translation();
    CHECK((p.array() > spec.room_min.array()).all());
    CHECK((p.array() < spec.room_max.array()).all());
    for (const Placed& b : solids) {
      const bool inside =
          (p.array() >= b.lo.array()).all() && (p.array() <= b.hi.array()).all();
      CHECK_FALSE(inside);
    }
    if (i == 0) continue;
    const PoseError step = pose_error(poses[i], poses[i - 1]);
    CHECK(step.translation_m < 0.1);
    CHECK(step.rotation_deg < 10.0);
  }

  // The walk is meant to lap the room rather than linger: over 60 frames the
  // viewpoints should spread over a decent fraction of the floor plan.
  Vec3 lo = poses[0].translation(), hi = lo;
  for (const SE3Pose& pose : poses) {
    lo = lo.cwiseMin(pose.translation());
    hi = hi.cwiseMax(pose.translation());
  }
  CHECK((hi - lo).head<2>().norm() > 1.0);

  const std::vector<SE3Pose> again = generate_trajectory(spec, 60, 9);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    CHECK(again[i].translation() == poses[i].translation());
    CHECK(again[i].rotation() == poses[i].rotation());
  }
  const std::vector<SE3Pose> other = generate_trajectory(spec, 60, 10);
  CHECK(other[0].translation() != poses[0].translation());
}
