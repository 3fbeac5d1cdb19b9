#include <doctest.h>

#include <cmath>
#include <random>
#include <unordered_map>
#include <vector>

#include "nrt/error.hpp"
#include "nrt/pose_estimation.hpp"
#include "nrt/rng.hpp"

using namespace nrt;

namespace {

LeafGMM point_leaf(int leaf_id, const Vec3& mean, double var = 1e-4) {
  LeafGMM g;
  g.leaf_id = leaf_id;
  g.bandwidth = 0.1;
  GaussianMode m;
  m.mean = mean;
  m.covariance = Mat3::Identity() * var;
  m.weight = 1.0;
  m.support = 100;
  g.modes.push_back(m);
  return g;
}

RoutingResult routed_to(std::vector<RoutedLeaf> leaves) {
  RoutingResult r;
  r.status = RoutingResult::Status::kRouted;
  r.leaves = std::move(leaves);
  return r;
}

RoutingResult rejected_result() {
  RoutingResult r;
  r.status = RoutingResult::Status::kRejected;
  r.rejection_level = 0;
  r.outlier_probability = 1.0;
  return r;
}

std::vector<Vec3> box_scatter(int n, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), 2.0 + 0.5 * u(rng));
  return pts;
}

SE3Pose planted_pose() {
  return SE3Pose(rotation_about_axis(Vec3(0.3, 1.0, -0.2), 0.6), Vec3(1.5, -0.7, 0.9));
}

// Single-tree setup where query i routes to its own leaf whose sole mode
// sits at world[i]. Exact correspondences, so kabsch over any inlier triple
// reproduces the planted pose to machine precision.
struct PlantedScene {
  FrameCloud frame;
  std::vector<int> queries;
  std::vector<LeafGMM> gmms;
  std::vector<std::vector<RoutingResult>> per_tree;
  std::vector<std::unordered_map<int, const LeafGMM*>> maps;

  PlantedScene(std::span<const Vec3> cam, std::span<const Vec3> world) {
    std::vector<RoutingResult> results;
    for (std::size_t i = 0; i < cam.size(); ++i) {
      OrientedPoint p;
      p.position = cam[i];
      frame.points.push_back(p);
      frame.pixels.emplace_back(static_cast<int>(i), 0);
      queries.push_back(static_cast<int>(i));
      gmms.push_back(point_leaf(static_cast<int>(i), world[i]));
      results.push_back(routed_to({{static_cast<int>(i), 1.0}}));
    }
    per_tree.push_back(std::move(results));
    maps.push_back(make_gmm_index(gmms));
  }

  CorrespondenceSampler sampler() const {
    return CorrespondenceSampler(frame, queries, per_tree, maps);
  }
};

}  // namespace

TEST_CASE("correspondence sampler pools trees and counts full rejections") {
  FrameCloud frame;
  for (int i = 0; i < 4; ++i) {
    OrientedPoint p;
    p.position = Vec3(i, 0, 1);
    frame.points.push_back(p);
    frame.pixels.emplace_back(i, 0);
  }
  const std::vector<int> queries = {0, 1, 2, 3};

  std::vector<LeafGMM> tree0_gmms = {point_leaf(0, Vec3(1, 0, 0)), point_leaf(10, Vec3(0, 0, 1)),
                                     point_leaf(11, Vec3(0, 1, 0))};
  std::vector<LeafGMM> tree1_gmms = {point_leaf(20, Vec3(1, 1, 1))};

  std::vector<std::vector<RoutingResult>> per_tree(2);
  per_tree[0] = {routed_to({{0, 1.0}}), rejected_result(), RoutingResult{},
                 routed_to({{10, 0.6}, {11, 0.2}})};
  per_tree[1] = {rejected_result(), rejected_result(), routed_to({{20, 1.0}}),
                 routed_to({{20, 0.5}, {99, 0.5}})};  // leaf 99 has no GMM

  std::vector<std::unordered_map<int, const LeafGMM*>> maps = {make_gmm_index(tree0_gmms),
                                                               make_gmm_index(tree1_gmms)};

  CorrespondenceSampler sampler(frame, queries, per_tree, maps);
  CHECK(sampler.query_count() == 4);
  // q0 routed by tree 0 alone, q2 by tree 1 alone, q3 by both. q1 is the
  // only query every tree rejected.
  CHECK(sampler.usable_count() == 3);
  CHECK(sampler.rejected_count() == 1);
  CHECK(sampler.rejection_rate() == doctest::Approx(0.25));
}

TEST_CASE("correspondence draw weighs contributing trees equally") {
  // One query, two trees. Tree 0 routes to leaves A and B with raw masses
  // 0.6 and 0.2 (renormalized to 0.75 / 0.25); tree 1 puts half its mass on
  // a leaf with no GMM, so its survivor renormalizes to 1. Equal tree
  // weighting then yields A 0.375, B 0.125, C 0.5.
  FrameCloud frame;
  OrientedPoint p;
  p.position = Vec3(0, 0, 1);
  frame.points.push_back(p);
  frame.pixels.emplace_back(0, 0);
  const std::vector<int> queries = {0};

  const Vec3 a(10, 0, 0), b(0, 10, 0), c(0, 0, 10);
  std::vector<LeafGMM> tree0_gmms = {point_leaf(1, a), point_leaf(2, b)};
  std::vector<LeafGMM> tree1_gmms = {point_leaf(3, c)};
  std::vector<std::vector<RoutingResult>> per_tree = {
      {routed_to({{1, 0.6}, {2, 0.2}})}, {routed_to({{3, 0.4}, {99, 0.4}})}};
  std::vector<std::unordered_map<int, const LeafGMM*>> maps = {make_gmm_index(tree0_gmms),
                                                               make_gmm_index(tree1_gmms)};

  CorrespondenceSampler sampler(frame, queries, per_tree, maps);
  REQUIRE(sampler.usable());

  auto rng = make_rng(99);
  const int n = 20000;
  int hits_a = 0, hits_b = 0, hits_c = 0;
  for (int i = 0; i < n; ++i) {
    const Correspondence corr = sampler.draw(rng);
    CHECK(corr.camera == Vec3(0, 0, 1));
    if (corr.world == a)
      ++hits_a;
    else if (corr.world == b)
      ++hits_b;
    else if (corr.world == c)
      ++hits_c;
  }
  CHECK(hits_a + hits_b + hits_c == n);
  CHECK(static_cast<double>(hits_a) / n == doctest::Approx(0.375).epsilon(0.05));
  CHECK(static_cast<double>(hits_b) / n == doctest::Approx(0.125).epsilon(0.1));
  CHECK(static_cast<double>(hits_c) / n == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("sampler with only unresolvable leaves is unusable, not rejected") {
  FrameCloud frame;
  OrientedPoint p;
  p.position = Vec3(0, 0, 1);
  frame.points.push_back(p);
  frame.pixels.emplace_back(0, 0);
  const std::vector<int> queries = {0};

  std::vector<LeafGMM> gmms;  // empty: the routed leaf resolves to nothing
  std::vector<std::vector<RoutingResult>> per_tree = {{routed_to({{7, 1.0}})}};
  std::vector<std::unordered_map<int, const LeafGMM*>> maps = {make_gmm_index(gmms)};

  CorrespondenceSampler sampler(frame, queries, per_tree, maps);
  CHECK_FALSE(sampler.usable());
  CHECK(sampler.rejected_count() == 0);

  RansacConfig cfg;
  CHECK_THROWS_AS(generate_hypotheses(sampler, cfg), Error);
}

TEST_CASE("exact correspondences reproduce the planted pose in every hypothesis") {
  const SE3Pose gt = planted_pose();
  const std::vector<Vec3> cam = box_scatter(60, 11);
  std::vector<Vec3> world(cam.size());
  for (std::size_t i = 0; i < cam.size(); ++i) world[i] = gt.apply(cam[i]);

  PlantedScene scene(cam, world);
  RansacConfig cfg;
  cfg.hypothesis_count = 16;
  cfg.seed = 3;

  const std::vector<PoseHypothesis> hyps = generate_hypotheses(scene.sampler(), cfg);
  REQUIRE(hyps.size() == 16);
  for (const PoseHypothesis& h : hyps) {
    const PoseError err = pose_error(h.pose, gt);
    CHECK(err.translation_m < 1e-9);
    CHECK(err.rotation_deg < 1e-7);
  }
}

TEST_CASE("rigidity gate exhausts resampling on incompatible distances") {
  const std::vector<Vec3> cam = box_scatter(40, 21);
  RansacConfig cfg;
  cfg.hypothesis_count = 4;
  cfg.max_resample = 30;

  SUBCASE("all world points coincide") {
    const std::vector<Vec3> world(cam.size(), Vec3(5, 5, 5));
    PlantedScene scene(cam, world);
    CHECK_THROWS_AS(generate_hypotheses(scene.sampler(), cfg), Error);
  }
  SUBCASE("uniform scaling violates pairwise distances") {
    const SE3Pose gt = planted_pose();
    std::vector<Vec3> world(cam.size());
    for (std::size_t i = 0; i < cam.size(); ++i) world[i] = gt.apply(1.5 * cam[i]);
    PlantedScene scene(cam, world);
    CHECK_THROWS_AS(generate_hypotheses(scene.sampler(), cfg), Error);
    // The same geometry passes once the tolerance admits the scale gap.
    cfg.rigidity_tol = 0.6;
    CHECK_NOTHROW(generate_hypotheses(scene.sampler(), cfg));
  }
}

TEST_CASE("preemptive ransac digs the planted pose out of heavy outliers") {
  const SE3Pose gt = planted_pose();
  const std::vector<Vec3> cam = box_scatter(200, 31);
  auto rng = make_rng(32);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<Vec3> world(cam.size());
  for (std::size_t i = 0; i < cam.size(); ++i)
    world[i] = (i % 2 == 0) ? gt.apply(cam[i]) : Vec3(u(rng), u(rng), u(rng));

  PlantedScene scene(cam, world);
  const CorrespondenceSampler sampler = scene.sampler();

  RansacConfig cfg;
  cfg.hypothesis_count = 256;
  cfg.eval_batch = 300;
  cfg.seed = 5;

  const RansacResult result = preemptive_ransac(generate_hypotheses(sampler, cfg), sampler, cfg);
  CHECK_FALSE(result.degraded);
  CHECK(result.round_best_scores.size() == 8);  // 256 -> 1 by halving
  const PoseError err = pose_error(result.best.pose, gt);
  CHECK(err.translation_m < 1e-6);
  CHECK(err.rotation_deg < 1e-4);
  CHECK_FALSE(result.best.inliers.empty());

  SUBCASE("thread count does not change the result") {
    RansacConfig threaded = cfg;
    threaded.threads = 4;
    const RansacResult again =
        preemptive_ransac(generate_hypotheses(sampler, threaded), sampler, threaded);
    CHECK(again.best.pose.rotation() == result.best.pose.rotation());
    CHECK(again.best.pose.translation() == result.best.pose.translation());
    CHECK(again.round_best_scores == result.round_best_scores);
  }
}

TEST_CASE("preemptive ransac ranks a planted winner above perturbed rivals") {
  const SE3Pose gt = planted_pose();
  const std::vector<Vec3> cam = box_scatter(120, 41);
  std::vector<Vec3> world(cam.size());
  for (std::size_t i = 0; i < cam.size(); ++i) world[i] = gt.apply(cam[i]);
  PlantedScene scene(cam, world);
  const CorrespondenceSampler sampler = scene.sampler();

  std::vector<PoseHypothesis> hyps(8);
  hyps[5].pose = gt;
  for (int i = 0; i < 8; ++i) {
    if (i == 5) continue;
    const Mat3 r = rotation_about_axis(Vec3(1, i, 2), 0.2 + 0.05 * i);
    hyps[i].pose = SE3Pose(r * gt.rotation(), gt.translation() + Vec3(0.5 + 0.1 * i, 0, 0));
  }

  RansacConfig cfg;
  cfg.hypothesis_count = 8;
  cfg.eval_batch = 100;
  cfg.seed = 17;
  const RansacResult result = preemptive_ransac(std::move(hyps), sampler, cfg);
  CHECK(result.round_best_scores.size() == 3);
  const PoseError err = pose_error(result.best.pose, gt);
  CHECK(err.translation_m < 1e-9);
  CHECK(err.rotation_deg < 1e-7);
}

namespace {

// Three mutually orthogonal planes with exact inward normals. step controls
// density; offset shifts samples along the planes so frame points do not
// coincide with scene points.
std::vector<OrientedPoint> corner_room(double step, double offset) {
  std::vector<OrientedPoint> pts;
  for (double a = offset; a <= 2.0; a += step)
    for (double b = offset; b <= 2.0; b += step) {
      OrientedPoint floor;  // z = 0, normal up
      floor.position = Vec3(a, b, 0);
      floor.normal = Vec3::UnitZ();
      OrientedPoint wall_x;  // x = 0, normal +x
      wall_x.position = Vec3(0, a, b);
      wall_x.normal = Vec3::UnitX();
      OrientedPoint wall_y;  // y = 0, normal +y
      wall_y.position = Vec3(a, 0, b);
      wall_y.normal = Vec3::UnitY();
      pts.insert(pts.end(), {floor, wall_x, wall_y});
    }
  return pts;
}

}  // namespace

TEST_CASE("icp pulls a 2 cm / 2 degree offset back onto the scene") {
  WorldPointCloud cloud;
  cloud.points = corner_room(0.02, 0.0);
  const SceneIndex scene(cloud);

  // Camera in the room interior, world points expressed in its frame.
  const SE3Pose gt(rotation_about_axis(Vec3(0.2, 1.0, 0.1), 0.8), Vec3(1.0, 1.0, 0.8));
  const SE3Pose gt_inv = gt.inverse();
  FrameCloud frame;
  for (const OrientedPoint& wp : corner_room(0.035, 0.013)) {
    OrientedPoint p;
    p.position = gt_inv.apply(wp.position);
    p.normal = gt_inv.rotate(wp.normal);
    frame.points.push_back(p);
    frame.pixels.emplace_back(0, 0);
  }
  REQUIRE(frame.size() > 3000);

  // Perturbation about the scene center keeps displacements inside the
  // association radius.
  const Vec3 center(1.0, 1.0, 0.7);
  const Mat3 r_delta = rotation_about_axis(Vec3(1.0, 0.5, -0.3), 2.0 * M_PI / 180.0);
  const SE3Pose delta(r_delta, center - r_delta * center + Vec3(0.015, -0.008, 0.01));
  const SE3Pose initial = delta.compose(gt);
  {
    const PoseError start = pose_error(initial, gt);
    REQUIRE(start.translation_m > 0.01);
    REQUIRE(start.rotation_deg == doctest::Approx(2.0));
  }

  RansacConfig cfg;
  const IcpResult result = icp_refine(initial, frame, scene, cfg);
  CHECK(result.refined);
  CHECK_FALSE(result.kept_initial);
  CHECK(result.iterations >= 1);
  CHECK(result.final_residual < result.initial_residual);

  const PoseError err = pose_error(result.pose, gt);
  CHECK(err.translation_m < 0.005);
  CHECK(err.rotation_deg < 0.5);

  SUBCASE("starting at the truth stays at the truth") {
    const IcpResult steady = icp_refine(gt, frame, scene, cfg);
    CHECK(steady.refined);
    const PoseError drift = pose_error(steady.pose, gt);
    CHECK(drift.translation_m < 1e-4);
    CHECK(drift.rotation_deg < 0.01);
  }
}

TEST_CASE("icp leaves the pose alone when the frame misses the scene") {
  WorldPointCloud cloud;
  cloud.points = corner_room(0.05, 0.0);
  const SceneIndex scene(cloud);

  FrameCloud frame;
  for (int i = 0; i < 500; ++i) {
    OrientedPoint p;
    p.position = Vec3(0.01 * i, 0.007 * i, 1.0);
    frame.points.push_back(p);
    frame.pixels.emplace_back(0, 0);
  }
  // Far from every scene point: no pairs, refinement never starts.
  const SE3Pose initial(Mat3::Identity(), Vec3(50, 50, 50));
  RansacConfig cfg;
  const IcpResult result = icp_refine(initial, frame, scene, cfg);
  CHECK_FALSE(result.refined);
  CHECK(result.pose.rotation() == initial.rotation());
  CHECK(result.pose.translation() == initial.translation());
  CHECK(result.initial_residual == doctest::Approx(cfg.icp_pair_radius));
  CHECK(result.final_residual == result.initial_residual);
}

TEST_CASE("trajectory files round-trip poses and N/A markers") {
  std::vector<TrajectoryEntry> entries(3);
  entries[0].frame_id = 0;
  entries[0].valid = true;
  entries[0].pose = planted_pose();
  entries[1].frame_id = 1;
  entries[1].valid = false;
  entries[2].frame_id = 7;
  entries[2].valid = true;
  entries[2].pose = SE3Pose(rotation_about_axis(Vec3(1, 1, 1), -1.3), Vec3(-0.25, 1e-7, 3.75));

  const auto path = std::filesystem::temp_directory_path() / "nrt_test_traj.txt";
  write_trajectory(entries, path);
  const std::vector<TrajectoryEntry> back = read_trajectory(path);
  std::filesystem::remove(path);

  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].frame_id == entries[i].frame_id);
    CHECK(back[i].valid == entries[i].valid);
    if (!entries[i].valid) continue;
    // %.17g preserves doubles exactly.
    CHECK(back[i].pose.rotation() == entries[i].pose.rotation());
    CHECK(back[i].pose.translation() == entries[i].pose.translation());
  }
}

TEST_CASE("ransac config validation rejects malformed settings") {
  RansacConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  RansacConfig bad = cfg;
  bad.hypothesis_count = 100;  // not a power of two
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.hypothesis_count = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.eval_batch = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.rigidity_tol = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.inlier_mahal = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.icp_min_pairs = 2;
  CHECK_THROWS_AS(bad.validate(), Error);
}
