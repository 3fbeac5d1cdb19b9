#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nrt/neural_net.hpp"
#include "nrt/partition_tree.hpp"
#include "nrt/routing_features.hpp"

namespace nrt {

// Per-level routing classifier. Rows of evaluate() are class probabilities
// for samples[i] under node_ids[i]: child slots 0..m-1, plus an outlier
// class at index m when the level has one. Probabilities of empty child
// slots must be exactly zero.
class NodeClassifier {
 public:
  virtual ~NodeClassifier() = default;
  virtual int split_levels() const = 0;
  virtual bool has_outlier_class(int level) const = 0;
  virtual int context_n(int level) const = 0;
  virtual MatX<float> evaluate(int level, std::span<const RoutingSample> samples,
                               std::span<const int> node_ids) const = 0;
};

// Adapter over trained per-level routing networks (router i handles split
// level i). Does not own the routers.
class TrainedClassifier final : public NodeClassifier {
 public:
  explicit TrainedClassifier(std::span<const LevelRouter<float>> routers);

  int split_levels() const override { return static_cast<int>(routers_.size()); }
  bool has_outlier_class(int level) const override;
  int context_n(int level) const override;
  MatX<float> evaluate(int level, std::span<const RoutingSample> samples,
                       std::span<const int> node_ids) const override;

 private:
  std::span<const LevelRouter<float>> routers_;
};

// How a query gets declared an outlier. kGreedyPath follows the per-level
// argmax and rejects when the outlier class wins anywhere on that path.
// kBeamConsensus rejects when the beam-mass-weighted outlier probability at
// some level exceeds the threshold.
enum class RejectRule { kGreedyPath, kBeamConsensus };

RejectRule reject_rule_from_string(const std::string& name);
std::string to_string(RejectRule rule);

struct RouteConfig {
  int beam_width = 4;
  RejectRule reject_rule = RejectRule::kGreedyPath;
  double consensus_threshold = 0.5;  // kBeamConsensus only
  std::uint64_t seed = 0;
  int threads = 1;
};

struct RoutedLeaf {
  int leaf_id = kEmptyChild;
  double probability = 0;  // product of per-level child probabilities
};

struct RoutingResult {
  enum class Status { kRouted, kRejected, kDeadEnd };
  Status status = Status::kDeadEnd;
  std::vector<RoutedLeaf> leaves;  // probability descending, ties by id
  int rejection_level = -1;        // split level that voted outlier
  double outlier_probability = 0;  // at the rejecting node / level
};

// Network rows evaluated per split level, for verifying that rejected
// queries stop paying below their rejection level.
struct RouteStats {
  std::vector<std::int64_t> evals_per_level;
  std::int64_t routed = 0;
  std::int64_t rejected = 0;
  std::int64_t dead_end = 0;

  void merge(const RouteStats& other);
};

// Beam routing of whole-frame query batches, level-synchronous so every
// network runs once per level over all still-active (query, node) pairs.
// Context samples are drawn once per (query, level) with the level's node
// ball radius; seeds derive from cfg.seed and the query's position in
// query_indices, so results are independent of threading.
std::vector<RoutingResult> route_frame(const PartitionTree& tree, const NodeClassifier& classifier,
                                       const FrameCloud& frame,
                                       std::span<const int> query_indices, const RouteConfig& cfg,
                                       RouteStats* stats = nullptr);

RoutingResult route(const PartitionTree& tree, const NodeClassifier& classifier,
                    const FrameCloud& frame, int query_index, const RouteConfig& cfg,
                    RouteStats* stats = nullptr);

}  // namespace nrt
