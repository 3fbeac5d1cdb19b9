#include "nrt/pose_estimation.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "nrt/error.hpp"
#include "nrt/parallel.hpp"
#include "nrt/rng.hpp"

namespace nrt {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void RansacConfig::validate() const {
  if (!is_power_of_two(hypothesis_count) || hypothesis_count < 2)
    throw Error("ransac: hypothesis_count must be a power of two >= 2");
  if (eval_batch < 1) throw Error("ransac: eval_batch must be positive");
  if (rigidity_tol <= 0 || rigidity_tol >= 1) throw Error("ransac: rigidity_tol must be in (0,1)");
  if (max_resample < 1) throw Error("ransac: max_resample must be positive");
  if (mahal_clamp <= 0) throw Error("ransac: mahal_clamp must be positive");
  if (inlier_mahal <= 0) throw Error("ransac: inlier_mahal must be positive");
  if (icp_max_iter < 1 || icp_pair_radius <= 0 || icp_convergence <= 0 || icp_min_pairs < 3 ||
      icp_max_points < 3)
    throw Error("ransac: invalid icp settings");
}

std::unordered_map<int, const LeafGMM*> make_gmm_index(std::span<const LeafGMM> gmms) {
  std::unordered_map<int, const LeafGMM*> index;
  index.reserve(gmms.size());
  for (const LeafGMM& g : gmms) index.emplace(g.leaf_id, &g);
  return index;
}

CorrespondenceSampler::CorrespondenceSampler(
    const FrameCloud& frame, std::span<const int> query_indices,
    std::span<const std::vector<RoutingResult>> per_tree,
    std::span<const std::unordered_map<int, const LeafGMM*>> gmm_maps) {
  if (per_tree.empty()) throw Error("correspondence sampler: no routing results");
  if (per_tree.size() != gmm_maps.size())
    throw Error("correspondence sampler: per-tree results and GMM maps disagree");
  for (const auto& results : per_tree)
    if (results.size() != query_indices.size())
      throw Error("correspondence sampler: result count does not match queries");

  query_total_ = static_cast<int>(query_indices.size());
  for (std::size_t q = 0; q < query_indices.size(); ++q) {
    RoutedQuery rq;
    rq.camera = frame.points[query_indices[q]].position;
    int routed_trees = 0;
    int rejected_trees = 0;
    std::vector<LeafChoice> pooled;
    for (std::size_t t = 0; t < per_tree.size(); ++t) {
      const RoutingResult& r = per_tree[t][q];
      if (r.status == RoutingResult::Status::kRejected) {
        ++rejected_trees;
        continue;
      }
      if (r.status != RoutingResult::Status::kRouted) continue;
      // Normalize this tree's leaf mass so each contributing tree weighs
      // equally in the union.
      double mass = 0;
      std::vector<LeafChoice> tree_choices;
      for (const RoutedLeaf& leaf : r.leaves) {
        auto it = gmm_maps[t].find(leaf.leaf_id);
        if (it == gmm_maps[t].end() || it->second->modes.empty()) continue;
        tree_choices.push_back({it->second, leaf.probability});
        mass += leaf.probability;
      }
      if (tree_choices.empty() || mass <= 0) continue;
      for (LeafChoice& c : tree_choices) c.probability /= mass;
      pooled.insert(pooled.end(), tree_choices.begin(), tree_choices.end());
      ++routed_trees;
    }
    if (routed_trees > 0) {
      for (LeafChoice& c : pooled) c.probability /= routed_trees;
      rq.leaves = std::move(pooled);
      queries_.push_back(std::move(rq));
    } else if (rejected_trees == static_cast<int>(per_tree.size())) {
      ++rejected_;
    }
  }
}

double CorrespondenceSampler::rejection_rate() const {
  return query_total_ > 0 ? static_cast<double>(rejected_) / query_total_ : 0.0;
}

Correspondence CorrespondenceSampler::draw(std::mt19937_64& rng) const {
  if (queries_.empty()) throw Error("correspondence sampler: no routed queries");
  const auto& q = queries_[rng() % queries_.size()];
  auto [world, mode] = sample_correspondence(q.leaves, rng);
  return {q.camera, world, mode};
}

std::vector<PoseHypothesis> generate_hypotheses(const CorrespondenceSampler& sampler,
                                                const RansacConfig& cfg) {
  cfg.validate();
  if (!sampler.usable()) throw Error("generate_hypotheses: no usable correspondences");

  std::vector<PoseHypothesis> hyps(cfg.hypothesis_count);
  std::atomic<bool> failed{false};
  parallel_for(0, hyps.size(), cfg.threads, [&](std::size_t h) {
    if (failed.load(std::memory_order_relaxed)) return;
    auto rng = make_rng(cfg.seed, 0x687970ull, h);
    for (int attempt = 0; attempt < cfg.max_resample; ++attempt) {
      Correspondence c[3];
      for (auto& ci : c) ci = sampler.draw(rng);
      bool rigid = true;
      for (int i = 0; i < 3 && rigid; ++i)
        for (int j = i + 1; j < 3 && rigid; ++j) {
          const double dc = (c[i].camera - c[j].camera).norm();
          const double dw = (c[i].world - c[j].world).norm();
          if (dc < 1e-9 || std::abs(dw - dc) > cfg.rigidity_tol * dc) rigid = false;
        }
      if (!rigid) continue;
      const Vec3 cam[3] = {c[0].camera, c[1].camera, c[2].camera};
      const Vec3 world[3] = {c[0].world, c[1].world, c[2].world};
      try {
        hyps[h].pose = kabsch(cam, world);
      } catch (const Error&) {
        continue;  // collinear triple
      }
      return;
    }
    failed.store(true, std::memory_order_relaxed);
  });
  if (failed.load())
    throw Error("generate_hypotheses: insufficient rigid correspondences for " +
                std::to_string(cfg.hypothesis_count) + " hypotheses");
  return hyps;
}

RansacResult preemptive_ransac(std::vector<PoseHypothesis> hypotheses,
                               const CorrespondenceSampler& sampler, const RansacConfig& cfg) {
  cfg.validate();
  RansacResult result;
  if (hypotheses.empty()) throw Error("preemptive_ransac: no hypotheses");
  std::vector<int> ids(hypotheses.size());
  std::iota(ids.begin(), ids.end(), 0);

  auto batch_rng = make_rng(cfg.seed, 0x626174636865ull);
  std::vector<Correspondence> batch;
  std::vector<Mat3> inv_l;  // per-correspondence inverse Cholesky factor

  int round = 0;
  while (hypotheses.size() > 1) {
    batch.clear();
    try {
      for (int i = 0; i < cfg.eval_batch; ++i) batch.push_back(sampler.draw(batch_rng));
    } catch (const Error&) {
      result.degraded = true;
      break;
    }
    inv_l.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Eigen::LLT<Mat3> llt(batch[i].mode->covariance);
      if (llt.info() != Eigen::Success)
        throw Error("preemptive_ransac: mode covariance not positive definite");
      inv_l[i] = Mat3(llt.matrixL()).inverse();
    }

    parallel_for(0, hypotheses.size(), cfg.threads, [&](std::size_t h) {
      PoseHypothesis& hyp = hypotheses[h];
      hyp.inliers.clear();
      double add = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Vec3 pred = hyp.pose.apply(batch[i].camera);
        const double d = (inv_l[i] * (pred - batch[i].mode->mean)).norm();
        add += std::min(d, cfg.mahal_clamp);
        if (d < cfg.inlier_mahal) hyp.inliers.push_back(static_cast<int>(i));
      }
      hyp.score += add;
    });

    std::vector<std::size_t> order(hypotheses.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (hypotheses[a].score != hypotheses[b].score)
        return hypotheses[a].score < hypotheses[b].score;
      return ids[a] < ids[b];
    });
    const std::size_t keep = std::max<std::size_t>(1, hypotheses.size() / 2);
    std::vector<PoseHypothesis> survivors;
    std::vector<int> survivor_ids;
    survivors.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      survivors.push_back(std::move(hypotheses[order[i]]));
      survivor_ids.push_back(ids[order[i]]);
    }
    hypotheses = std::move(survivors);
    ids = std::move(survivor_ids);
    result.round_best_scores.push_back(hypotheses.front().score);

    // Locally-optimized step: refit each survivor on its batch inliers.
    parallel_for(0, hypotheses.size(), cfg.threads, [&](std::size_t h) {
      PoseHypothesis& hyp = hypotheses[h];
      if (hyp.inliers.size() < 3) return;
      std::vector<Vec3> cam, world;
      cam.reserve(hyp.inliers.size());
      world.reserve(hyp.inliers.size());
      for (int i : hyp.inliers) {
        cam.push_back(batch[i].camera);
        world.push_back(batch[i].world);
      }
      try {
        hyp.pose = kabsch(cam, world);
      } catch (const Error&) {
        // degenerate inlier set; keep the unrefined pose
      }
    });
    ++round;
  }
  result.best = std::move(hypotheses.front());
  return result;
}

SceneIndex::SceneIndex(const WorldPointCloud& world_cloud) : cloud(&world_cloud) {
  std::vector<Vec3> positions(world_cloud.points.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = world_cloud.points[i].position;
  grid = VoxelGrid(positions, 0.05);
}

namespace {

// Mean |point-to-plane| residual of the selected frame points under the
// pose, with unmatched points contributing the association radius.
double mean_capped_residual(const SE3Pose& pose, std::span<const int> selection,
                            const FrameCloud& frame, const SceneIndex& scene, double radius) {
  double sum = 0;
  for (int idx : selection) {
    const Vec3 qw = pose.apply(frame.points[idx].position);
    const std::vector<int> nn = scene.grid.knn(qw, 1);
    double r = radius;
    if (!nn.empty()) {
      const OrientedPoint& s = scene.cloud->points[nn[0]];
      if ((s.position - qw).norm() <= radius)
        r = std::min(std::abs(s.normal.dot(qw - s.position)), radius);
    }
    sum += r;
  }
  return selection.empty() ? radius : sum / static_cast<double>(selection.size());
}

}  // namespace

IcpResult icp_refine(const SE3Pose& initial, const FrameCloud& frame, const SceneIndex& scene,
                     const RansacConfig& cfg) {
  IcpResult result;
  result.pose = initial;

  std::vector<int> selection;
  const int n = frame.size();
  const int stride = std::max(1, n / cfg.icp_max_points);
  for (int i = 0; i < n; i += stride) selection.push_back(i);

  result.initial_residual =
      mean_capped_residual(initial, selection, frame, scene, cfg.icp_pair_radius);
  result.final_residual = result.initial_residual;

  SE3Pose pose = initial;
  for (int iter = 0; iter < cfg.icp_max_iter; ++iter) {
    Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
    int pairs = 0;
    for (int idx : selection) {
      const Vec3 qw = pose.apply(frame.points[idx].position);
      const std::vector<int> nn = scene.grid.knn(qw, 1);
      if (nn.empty()) continue;
      const OrientedPoint& s = scene.cloud->points[nn[0]];
      if ((s.position - qw).norm() > cfg.icp_pair_radius) continue;
      Eigen::Matrix<double, 6, 1> j;
      j.head<3>() = qw.cross(s.normal);
      j.tail<3>() = s.normal;
      const double e = s.normal.dot(qw - s.position);
      ata.noalias() += j * j.transpose();
      atb.noalias() -= j * e;
      ++pairs;
    }
    if (iter == 0 && pairs < cfg.icp_min_pairs) return result;  // refined stays false
    if (pairs < 6) break;

    const Eigen::Matrix<double, 6, 1> x = ata.ldlt().solve(atb);
    const Vec3 omega = x.head<3>();
    const Vec3 t_delta = x.tail<3>();
    Mat3 r_delta = Mat3::Identity();
    if (omega.norm() > 1e-15) r_delta = rotation_about_axis(omega, omega.norm());
    pose = SE3Pose(r_delta, t_delta).compose(pose);
    result.iterations = iter + 1;
    if (t_delta.norm() < cfg.icp_convergence && omega.norm() < cfg.icp_convergence) break;
  }
  result.refined = true;

  const double refined_residual =
      mean_capped_residual(pose, selection, frame, scene, cfg.icp_pair_radius);
  if (refined_residual <= result.initial_residual) {
    result.pose = pose;
    result.final_residual = refined_residual;
  } else {
    result.pose = initial;
    result.final_residual = result.initial_residual;
    result.kept_initial = true;
  }
  return result;
}

LocalizeResult localize_frame(const FrameCloud& frame, std::span<const ModelArm> arms,
                              const SceneIndex* scene, const LocalizeConfig& cfg) {
  LocalizeResult out;
  if (arms.empty()) throw Error("localize_frame: no model arms");
  if (frame.size() < 3) {
    out.failure = "frame has fewer than 3 valid depth points";
    return out;
  }

  const int query_count = std::min(cfg.query_count, frame.size());
  std::vector<int> all(frame.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> queries;
  queries.reserve(query_count);
  auto qrng = make_rng(cfg.seed, 0x717565727953ull);
  std::sample(all.begin(), all.end(), std::back_inserter(queries), query_count, qrng);
  out.diagnostics.query_count = query_count;

  const auto t_route = std::chrono::steady_clock::now();
  std::vector<std::vector<RoutingResult>> per_tree(arms.size());
  std::vector<std::unordered_map<int, const LeafGMM*>> gmm_maps;
  RouteStats stats;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    RouteConfig rc = cfg.route;
    rc.seed = mix_seed(mix_seed(cfg.seed, 0x726f757465ull), a);
    rc.threads = cfg.threads;
    per_tree[a] = route_frame(*arms[a].tree, *arms[a].classifier, frame, queries, rc, &stats);
    gmm_maps.push_back(*arms[a].gmms);
  }
  out.diagnostics.routing_seconds = seconds_since(t_route);
  out.diagnostics.routed = static_cast<int>(stats.routed);
  out.diagnostics.rejected = static_cast<int>(stats.rejected);
  out.diagnostics.dead_end = static_cast<int>(stats.dead_end);

  out.diagnostics.query_indices = queries;
  out.diagnostics.first_arm_routing = per_tree.front();

  CorrespondenceSampler sampler(frame, queries, per_tree, gmm_maps);
  out.diagnostics.rejection_rate = sampler.rejection_rate();
  if (!sampler.usable()) {
    out.failure = "no routed queries with fitted leaf modes";
    return out;
  }

  const auto t_ransac = std::chrono::steady_clock::now();
  RansacConfig rcfg = cfg.ransac;
  rcfg.seed = mix_seed(cfg.seed, 0x72616e736163ull);
  rcfg.threads = cfg.threads;
  RansacResult ransac;
  try {
    ransac = preemptive_ransac(generate_hypotheses(sampler, rcfg), sampler, rcfg);
  } catch (const Error& e) {
    out.failure = e.what();
    return out;
  }
  out.diagnostics.ransac_seconds = seconds_since(t_ransac);
  out.diagnostics.round_best_scores = ransac.round_best_scores;
  out.diagnostics.degraded = ransac.degraded;
  out.pose = ransac.best.pose;
  out.valid = true;

  if (rcfg.icp && scene) {
    const auto t_icp = std::chrono::steady_clock::now();
    const IcpResult icp = icp_refine(out.pose, frame, *scene, rcfg);
    out.diagnostics.icp_seconds = seconds_since(t_icp);
    out.diagnostics.icp_ran = icp.refined;
    out.diagnostics.icp_kept_initial = icp.kept_initial;
    out.diagnostics.icp_initial_residual = icp.initial_residual;
    out.diagnostics.icp_final_residual = icp.final_residual;
    out.pose = icp.pose;
  }
  return out;
}

void write_trajectory(std::span<const TrajectoryEntry> entries,
                      const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("write_trajectory: cannot open " + path.string());
  for (const TrajectoryEntry& e : entries) {
    char line[512];
    const Mat3& r = e.pose.rotation();
    const Vec3& t = e.pose.translation();
    std::snprintf(line, sizeof(line),
                  "%d %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %s",
                  e.frame_id, r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0),
                  r(2, 1), r(2, 2), t(0), t(1), t(2), e.valid ? "ok" : "na");
    os << line << '\n';
  }
  if (!os) throw Error("write_trajectory: write failed for " + path.string());
}

std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("read_trajectory: cannot open " + path.string());
  std::vector<TrajectoryEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    TrajectoryEntry e;
    Mat3 r;
    Vec3 t;
    std::string status;
    ss >> e.frame_id;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) ss >> r(i, j);
    for (int i = 0; i < 3; ++i) ss >> t(i);
    ss >> status;
    if (!ss) throw Error("read_trajectory: malformed line: " + line);
    e.valid = status == "ok";
    e.pose = e.valid ? SE3Pose(r, t) : SE3Pose();
    entries.push_back(e);
  }
  return entries;
}

}  // namespace nrt
