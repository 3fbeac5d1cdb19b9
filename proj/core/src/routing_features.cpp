#include "nrt/routing_features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "nrt/binary_io.hpp"
#include "nrt/error.hpp"
#include "nrt/rng.hpp"

namespace nrt {

namespace {

constexpr char kTrainSetMagic[4] = {'N', 'R', 'T', 'S'};
constexpr std::uint32_t kTrainSetVersion = 1;

double angle_between(const Vec3& u, const Vec3& v) {
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

void check_unit_normal(const Vec3& n, const char* who) {
  if (std::abs(n.norm() - 1.0) > 1e-3)
    throw Error(std::string("ppf: non-unit ") + who + " normal");
}

}  // namespace

Eigen::Vector4d ppf(const OrientedPoint& query, const OrientedPoint& context) {
  check_unit_normal(query.normal, "query");
  check_unit_normal(context.normal, "context");
  const Vec3 d = query.position - context.position;
  const double dist = d.norm();
  Eigen::Vector4d r;
  if (dist < 1e-9) {
    r[0] = 0.0;
    r[1] = 0.0;
  } else {
    r[0] = angle_between(query.normal, d);
    r[1] = angle_between(context.normal, d);
  }
  r[2] = angle_between(query.normal, context.normal);
  r[3] = dist;
  return r;
}

FrameCloud make_frame_cloud(const ColorImage* color, const DepthImage& depth,
                            const CameraIntrinsics& intrinsics, int normal_k) {
  const auto pixels = backproject(depth, intrinsics);
  if (static_cast<int>(pixels.size()) < normal_k)
    throw Error("make_frame_cloud: too few valid pixels");
  std::vector<Vec3> positions(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) positions[i] = pixels[i].position;
  const auto normals = estimate_normals(positions, normal_k);

  FrameCloud frame;
  frame.points.resize(pixels.size());
  frame.pixels.resize(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    OrientedPoint& p = frame.points[i];
    p.position = positions[i];
    p.normal = normals[i];
    if (color) {
      const auto& rgb = color->at(pixels[i].u, pixels[i].v);
      p.color = {rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
    }
    frame.pixels[i] = {pixels[i].u, pixels[i].v};
  }
  // Cell on the order of the typical point spacing; ball queries whose radius
  // dwarfs the cloud fall back to a linear scan inside VoxelGrid.
  Vec3 lo = positions[0], hi = positions[0];
  for (const Vec3& p : positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = std::max((hi - lo).maxCoeff(), 1e-3);
  const double cell = std::max(extent / std::cbrt(static_cast<double>(positions.size())) * 2.0, 1e-3);
  frame.index = std::make_unique<VoxelGrid>(positions, cell);
  return frame;
}

std::vector<int> sample_context_indices(const FrameCloud& frame, const Vec3& query_position,
                                        double radius, int n, std::mt19937_64& rng) {
  if (n < 1) throw Error("sample_context: need at least one context point");
  if (radius <= 0) throw Error("sample_context: radius must be positive");
  if (!frame.index) throw Error("sample_context: frame has no spatial index");
  std::vector<int> candidates = frame.index->radius_query(query_position, radius);
  if (candidates.empty()) throw Error("sample_context: empty neighbourhood ball");

  std::vector<int> chosen;
  if (static_cast<int>(candidates.size()) > n) {
    chosen.reserve(n);
    std::sample(candidates.begin(), candidates.end(), std::back_inserter(chosen), n, rng);
  } else {
    chosen = candidates;
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    while (static_cast<int>(chosen.size()) < n) chosen.push_back(candidates[pick(rng)]);
  }
  return chosen;
}

namespace {

// Features carry chromaticity, not raw color: per-frame illumination scales
// every channel equally, and the channel shares cancel that factor exactly.
std::array<float, 3> chromaticity(const Vec3& c) {
  const double sum = c[0] + c[1] + c[2];
  if (sum < 1e-9) return {1.0f / 3, 1.0f / 3, 1.0f / 3};
  return {static_cast<float>(c[0] / sum), static_cast<float>(c[1] / sum),
          static_cast<float>(c[2] / sum)};
}

}  // namespace

RoutingSample make_routing_sample(const FrameCloud& frame, int query_index, double radius, int n,
                                  std::mt19937_64& rng) {
  const OrientedPoint& query = frame.points.at(query_index);
  const auto context = sample_context_indices(frame, query.position, radius, n, rng);
  RoutingSample sample;
  sample.query_color = chromaticity(query.color);
  sample.context.resize(static_cast<std::size_t>(n) * kContextDim);
  for (int i = 0; i < n; ++i) {
    const OrientedPoint& o = frame.points[context[i]];
    const Eigen::Vector4d r = ppf(query, o);
    float* row = sample.context.data() + static_cast<std::size_t>(i) * kContextDim;
    const auto oc = chromaticity(o.color);
    row[0] = oc[0];
    row[1] = oc[1];
    row[2] = oc[2];
    for (int j = 0; j < 4; ++j) row[3 + j] = static_cast<float>(r[j]);
  }
  return sample;
}

TrainingSetBuilder::TrainingSetBuilder(std::span<const PosedFrameCloud> frames,
                                       const PartitionTree& tree)
    : frames_(frames), tree_(tree) {
  if (frames.empty()) throw Error("TrainingSetBuilder: no frames");
  pools_.resize(tree.node_count());
  const int split_levels = tree.levels() - 1;
  frame_offset_.resize(frames.size() + 1, 0);
  for (std::size_t f = 0; f < frames.size(); ++f)
    frame_offset_[f + 1] = frame_offset_[f] + frames[f].cloud.points.size();
  total_points_ = frame_offset_.back();
  visited_.assign(split_levels, std::vector<std::int32_t>(total_points_, kEmptyChild));

  for (std::size_t f = 0; f < frames.size(); ++f) {
    const PosedFrameCloud& frame = frames_[f];
    for (std::size_t p = 0; p < frame.cloud.points.size(); ++p) {
      const Vec3 world = frame.pose.apply(frame.cloud.points[p].position);
      const LocateResult loc = tree.locate(world);
      const std::size_t gp = frame_offset_[f] + p;
      for (const auto& step : loc.steps) {
        NodePool& pool = pools_[step.node_id];
        pool.points.push_back(static_cast<std::uint32_t>(gp));
        pool.slots.push_back(static_cast<std::uint8_t>(step.child_slot));
        visited_[tree.node(step.node_id).level][gp] = step.node_id;
      }
      if (loc.status == LocateResult::Status::kEmptyRegion)
        visited_[tree.node(loc.blocked_node).level][gp] = loc.blocked_node;
    }
  }
}

std::pair<std::uint32_t, std::uint32_t> TrainingSetBuilder::resolve(std::size_t global) const {
  const auto it = std::upper_bound(frame_offset_.begin(), frame_offset_.end(), global);
  const std::uint32_t frame = static_cast<std::uint32_t>(it - frame_offset_.begin() - 1);
  return {frame, static_cast<std::uint32_t>(global - frame_offset_[frame])};
}

int TrainingSetBuilder::coverage(int node_id) const {
  return static_cast<int>(pools_.at(node_id).points.size());
}

std::vector<LabeledSample> TrainingSetBuilder::make_training_set(int node_id, int count,
                                                                 int inlier_ratio, int context_n,
                                                                 std::uint64_t seed) const {
  const TreeNode& node = tree_.node(node_id);
  if (node.is_leaf()) throw Error("make_training_set: leaves carry no routing function");
  if (count < 1 || inlier_ratio < 1) throw Error("make_training_set: bad sample counts");
  const NodePool& pool = pools_[node_id];
  if (pool.points.empty())
    throw Error("make_training_set: node " + std::to_string(node_id) +
                " is not covered by any frame");

  // Outlier class exists only when routing into levels >= 2, i.e. for nodes
  // below the root.
  const int outliers = node.level >= 1 ? count / (inlier_ratio + 1) : 0;
  const int inliers = count - outliers;

  auto rng = make_rng(seed, static_cast<std::uint64_t>(node_id));
  std::vector<LabeledSample> out;
  out.reserve(count);

  std::uniform_int_distribution<std::size_t> pick_inlier(0, pool.points.size() - 1);
  for (int i = 0; i < inliers; ++i) {
    const std::size_t slot = pick_inlier(rng);
    const auto [f, p] = resolve(pool.points[slot]);
    LabeledSample s;
    s.sample = make_routing_sample(frames_[f].cloud, static_cast<int>(p), node.ball_radius,
                                   context_n, rng);
    s.node_id = node_id;
    s.label = pool.slots[slot];
    out.push_back(std::move(s));
  }

  if (outliers > 0) {
    const auto& visited = visited_[node.level];
    std::uniform_int_distribution<std::size_t> pick_any(0, total_points_ - 1);
    for (int i = 0; i < outliers; ++i) {
      std::size_t gp = pick_any(rng);
      int guard = 0;
      while (visited[gp] == node_id) {
        gp = pick_any(rng);
        if (++guard > 1'000'000)
          throw Error("make_training_set: no outlier candidates for node " +
                      std::to_string(node_id));
      }
      const auto [f, p] = resolve(gp);
      LabeledSample s;
      s.sample = make_routing_sample(frames_[f].cloud, static_cast<int>(p), node.ball_radius,
                                     context_n, rng);
      s.node_id = node_id;
      s.label = kOutlierLabel;
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<LabeledSample> make_training_set(std::span<const PosedFrameCloud> frames,
                                             const PartitionTree& tree, int node_id, int count,
                                             int inlier_ratio, int context_n, std::uint64_t seed) {
  return TrainingSetBuilder(frames, tree)
      .make_training_set(node_id, count, inlier_ratio, context_n, seed);
}

void save_training_set(std::span<const LabeledSample> samples, int context_n,
                       const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_training_set: cannot open " + path.string());
  io::write_magic(os, kTrainSetMagic);
  io::write_scalar<std::uint32_t>(os, kTrainSetVersion);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(context_n));
  io::write_scalar<std::uint64_t>(os, samples.size());
  for (const LabeledSample& s : samples) {
    if (s.sample.context_count() != context_n)
      throw Error("save_training_set: inconsistent context size");
    io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(s.node_id));
    io::write_scalar<std::int32_t>(os, s.label);
    for (float c : s.sample.query_color) io::write_scalar<float>(os, c);
    os.write(reinterpret_cast<const char*>(s.sample.context.data()),
             static_cast<std::streamsize>(s.sample.context.size() * sizeof(float)));
  }
  if (!os) throw Error("save_training_set: write failed for " + path.string());
}

std::vector<LabeledSample> load_training_set(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_training_set: cannot open " + path.string());
  io::expect_magic(is, kTrainSetMagic, "training set file");
  if (io::read_scalar<std::uint32_t>(is, "training set version") != kTrainSetVersion)
    throw Error("load_training_set: unsupported version");
  const int context_n = static_cast<int>(io::read_scalar<std::uint32_t>(is, "context count"));
  const auto count = io::read_scalar<std::uint64_t>(is, "sample count");
  std::vector<LabeledSample> samples(count);
  for (LabeledSample& s : samples) {
    s.node_id = static_cast<int>(io::read_scalar<std::uint32_t>(is, "sample node id"));
    s.label = io::read_scalar<std::int32_t>(is, "sample label");
    for (float& c : s.sample.query_color) c = io::read_scalar<float>(is, "query color");
    s.sample.context.resize(static_cast<std::size_t>(context_n) * kContextDim);
    is.read(reinterpret_cast<char*>(s.sample.context.data()),
            static_cast<std::streamsize>(s.sample.context.size() * sizeof(float)));
    if (!is) throw Error("truncated stream while reading sample context");
  }
  return samples;
}

}  // namespace nrt
