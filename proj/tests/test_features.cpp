#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "nrt/error.hpp"
#include "nrt/partition_tree.hpp"
#include "nrt/rng.hpp"
#include "nrt/routing_features.hpp"

using namespace nrt;

namespace {

OrientedPoint random_oriented(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  OrientedPoint p;
  p.position = Vec3(gauss(rng), gauss(rng), gauss(rng));
  p.normal = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
  p.color = Vec3(0.2, 0.4, 0.6);
  return p;
}

SE3Pose random_rigid(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  const Vec3 axis = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
  std::uniform_real_distribution<double> angle(-M_PI, M_PI);
  return SE3Pose(Eigen::AngleAxisd(angle(rng), axis).toRotationMatrix(),
                 Vec3(gauss(rng), gauss(rng), gauss(rng)) * 3.0);
}

OrientedPoint transform(const SE3Pose& pose, const OrientedPoint& p) {
  OrientedPoint out = p;
  out.position = pose.apply(p.position);
  out.normal = pose.rotate(p.normal);
  return out;
}

}  // namespace

TEST_CASE("pair features are invariant under rigid transforms") {
  auto rng = make_rng(71);
  double worst = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const OrientedPoint a = random_oriented(rng), b = random_oriented(rng);
    const SE3Pose t = random_rigid(rng);
    const Eigen::Vector4d f0 = ppf(a, b);
    const Eigen::Vector4d f1 = ppf(transform(t, a), transform(t, b));
    worst = std::max(worst, (f0 - f1).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("pair features separate genuinely different configurations") {
  OrientedPoint a, b;
  a.position = Vec3(0, 0, 0);
  a.normal = Vec3(0, 0, 1);
  b.position = Vec3(1, 0, 0);
  b.normal = Vec3(0, 0, 1);

  const Eigen::Vector4d parallel = ppf(a, b);
  CHECK(parallel[0] == doctest::Approx(M_PI / 2).epsilon(1e-12));  // n_q vs d
  CHECK(parallel[1] == doctest::Approx(M_PI / 2).epsilon(1e-12));
  CHECK(parallel[2] == doctest::Approx(0.0).epsilon(1e-12));  // normals aligned
  CHECK(parallel[3] == doctest::Approx(1.0).epsilon(1e-12));  // distance

  b.normal = Vec3(1, 0, 0);  // turn the partner normal toward the offset
  const Eigen::Vector4d turned = ppf(a, b);
  CHECK(turned[1] == doctest::Approx(M_PI).epsilon(1e-12));  // n_o vs d = -d direction
  CHECK(turned[2] == doctest::Approx(M_PI / 2).epsilon(1e-12));
  CHECK((parallel - turned).norm() > 0.5);  // distinct configurations stay distinct

  // Scaling is NOT an invariance: the distance entry must change.
  OrientedPoint b_far = b;
  b_far.position *= 2.0;
  CHECK(ppf(a, b_far)[3] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("coincident pair degrades gracefully") {
  OrientedPoint a, b;
  a.normal = Vec3(0, 0, 1);
  b.normal = Vec3(1, 0, 0);
  b.position = a.position;  // identical positions
  const Eigen::Vector4d f = ppf(a, b);
  CHECK(f[0] == 0.0);
  CHECK(f[1] == 0.0);
  CHECK(f[2] == doctest::Approx(M_PI / 2).epsilon(1e-12));
  CHECK(f[3] == 0.0);
}

namespace {

FrameCloud toy_frame(int n, std::uint64_t seed) {
  DepthImage depth(n, 1);
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> d(0.5, 3.0);
  for (int u = 0; u < n; ++u) depth.at(u, 0) = d(rng);
  CameraIntrinsics intr{50, 50, n / 2.0, 0.5, n, 1};
  return make_frame_cloud(nullptr, depth, intr, 5);
}

}  // namespace

TEST_CASE("context sampling draws from the ball, pads sparse balls") {
  const FrameCloud frame = toy_frame(200, 72);
  auto rng = make_rng(73);
  const Vec3 q = frame.points[100].position;

  const auto wide = sample_context_indices(frame, q, 10.0, 64, rng);
  CHECK(static_cast<int>(wide.size()) == 64);
  std::set<int> unique_wide(wide.begin(), wide.end());
  CHECK(unique_wide.size() == 64);  // plenty of candidates: no repeats

  // A radius that captures only a handful of points forces replacement.
  const auto ball = frame.index->radius_query(q, 0.08);
  if (ball.size() >= 2 && ball.size() < 32) {
    auto tight = sample_context_indices(frame, q, 0.08, 32, rng);
    CHECK(static_cast<int>(tight.size()) == 32);
    for (int idx : tight)
      CHECK((frame.points[idx].position - q).norm() <= 0.08 + 1e-12);
  }

  CHECK_THROWS_AS(sample_context_indices(frame, Vec3(1000, 1000, 1000), 0.01, 4, rng), Error);
}

TEST_CASE("routing samples carry chromaticity and scaled context rows") {
  DepthImage depth(64, 1);
  ColorImage color(64, 1);
  for (int u = 0; u < 64; ++u) {
    depth.at(u, 0) = 1.0 + 0.01 * u;
    color.at(u, 0) = {static_cast<std::uint8_t>(4 * u), 128, 30};
  }
  CameraIntrinsics intr{50, 50, 32, 0.5, 64, 1};
  const FrameCloud frame = make_frame_cloud(&color, depth, intr, 5);
  auto rng = make_rng(74);
  const RoutingSample s = make_routing_sample(frame, 10, 5.0, 16, rng);
  CHECK(s.context_count() == 16);
  const Vec3& qc = frame.points[10].color;
  CHECK(s.query_color[0] == doctest::Approx(qc.x() / qc.sum()).epsilon(1e-6));
  CHECK(s.query_color[0] + s.query_color[1] + s.query_color[2] ==
        doctest::Approx(1.0).epsilon(1e-6));
  for (int i = 0; i < 16; ++i) {
    const float* row = s.context.data() + i * kContextDim;
    for (int c = 0; c < 3; ++c) {
      CHECK(row[c] >= 0.0f);
      CHECK(row[c] <= 1.0f);
    }
    CHECK(row[0] + row[1] + row[2] == doctest::Approx(1.0).epsilon(1e-6));
    for (int c = 3; c < 6; ++c) {
      CHECK(row[c] >= 0.0f);
      CHECK(row[c] <= static_cast<float>(M_PI) + 1e-6f);
    }
    CHECK(row[6] >= 0.0f);
  }

  // Scaling every channel by a common illumination factor leaves the color
  // features untouched.
  ColorImage dim(64, 1);
  for (int u = 0; u < 64; ++u) {
    const auto& c = color.at(u, 0);
    dim.at(u, 0) = {static_cast<std::uint8_t>(c[0] * 0.7), static_cast<std::uint8_t>(c[1] * 0.7),
                    static_cast<std::uint8_t>(c[2] * 0.7)};
  }
  const FrameCloud dim_frame = make_frame_cloud(&dim, depth, intr, 5);
  auto rng2 = make_rng(74);
  const RoutingSample s2 = make_routing_sample(dim_frame, 10, 5.0, 16, rng2);
  for (int c = 0; c < 3; ++c)
    CHECK(s2.query_color[c] == doctest::Approx(s.query_color[c]).epsilon(0.02));
}

namespace {

// A posed frame whose pixels tile a known world-space square, so tree labels
// are predictable.
std::vector<PosedFrameCloud> plane_frames() {
  std::vector<PosedFrameCloud> frames(2);
  for (int f = 0; f < 2; ++f) {
    DepthImage depth(40, 40);
    for (int v = 0; v < 40; ++v)
      for (int u = 0; u < 40; ++u) depth.at(u, v) = 2.0 + 0.001 * ((u * 7 + v * 3) % 5);
    CameraIntrinsics intr{40, 40, 20, 20, 40, 40};
    PosedFrameCloud& pf = frames[f];
    pf.cloud = make_frame_cloud(nullptr, depth, intr, 9);
    pf.pose = SE3Pose(Mat3::Identity(), Vec3(f * 0.4, 0, 0));
  }
  return frames;
}

}  // namespace

TEST_CASE("training sets label inliers by the true child slot") {
  const auto frames = plane_frames();
  // World cloud from the frames themselves keeps tree geometry aligned.
  WorldPointCloud cloud;
  for (const auto& pf : frames)
    for (const auto& p : pf.cloud.points) {
      OrientedPoint wp = p;
      wp.position = pf.pose.apply(p.position);
      cloud.points.push_back(wp);
    }
  cloud.provenance.resize(cloud.points.size());
  const PartitionTree tree = build_tree(cloud, root_box(cloud, BoxStrategy::kOriginal), 3, 4, 10);
  TrainingSetBuilder builder(frames, tree);

  const int root = tree.root_id();
  const auto root_set = builder.make_training_set(root, 400, 3, 8, 75);
  CHECK(root_set.size() >= 390);  // root draws inliers only
  for (const auto& s : root_set) {
    CHECK(s.node_id == root);
    REQUIRE(s.label >= 0);
    // Re-derive the ground-truth slot from the locate path.
    // Sample indices are not exposed, so check the label is a materialized child.
    CHECK(s.label < static_cast<int>(tree.node(root).children.size()));
    CHECK(tree.node(root).children[s.label] != kEmptyChild);
  }

  const auto level1 = tree.nodes_at_level(1);
  REQUIRE(!level1.empty());
  int node = -1;
  for (int id : level1)
    if (builder.coverage(id) > 50) node = id;
  REQUIRE(node != -1);
  const auto set1 = builder.make_training_set(node, 400, 3, 8, 76);
  int inliers = 0, outliers = 0;
  for (const auto& s : set1) {
    if (s.label == kOutlierLabel)
      ++outliers;
    else
      ++inliers;
  }
  CHECK(inliers > 0);
  CHECK(outliers > 0);
  // count split inlier_ratio:1
  CHECK(inliers == doctest::Approx(3.0 * outliers).epsilon(0.15));
}

TEST_CASE("training set serialization round-trips") {
  const auto frames = plane_frames();
  WorldPointCloud cloud;
  for (const auto& pf : frames)
    for (const auto& p : pf.cloud.points) {
      OrientedPoint wp = p;
      wp.position = pf.pose.apply(p.position);
      cloud.points.push_back(wp);
    }
  cloud.provenance.resize(cloud.points.size());
  const PartitionTree tree = build_tree(cloud, root_box(cloud, BoxStrategy::kOriginal), 3, 4, 10);
  const auto samples = make_training_set(frames, tree, tree.root_id(), 100, 3, 8, 77);

  const auto path = std::filesystem::temp_directory_path() / "nrt_test_samples.nrts";
  save_training_set(samples, 8, path);
  const auto back = load_training_set(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); i += 13) {
    CHECK(back[i].node_id == samples[i].node_id);
    CHECK(back[i].label == samples[i].label);
    CHECK(back[i].sample.query_color == samples[i].sample.query_color);
    CHECK(back[i].sample.context == samples[i].sample.context);
  }
}
