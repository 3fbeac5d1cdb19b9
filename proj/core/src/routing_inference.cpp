#include "nrt/routing_inference.hpp"

#include <algorithm>
#include <cmath>

#include "nrt/error.hpp"
#include "nrt/parallel.hpp"
#include "nrt/rng.hpp"

namespace nrt {

TrainedClassifier::TrainedClassifier(std::span<const LevelRouter<float>> routers)
    : routers_(routers) {
  for (std::size_t i = 0; i < routers_.size(); ++i)
    if (routers_[i].level() != static_cast<int>(i))
      throw Error("TrainedClassifier: routers must be ordered by split level");
}

bool TrainedClassifier::has_outlier_class(int level) const {
  return routers_[level].has_outlier_slot();
}

int TrainedClassifier::context_n(int level) const { return routers_[level].context_n(); }

MatX<float> TrainedClassifier::evaluate(int level, std::span<const RoutingSample> samples,
                                        std::span<const int> node_ids) const {
  return routers_[level].forward(samples, node_ids);
}

RejectRule reject_rule_from_string(const std::string& name) {
  if (name == "greedy") return RejectRule::kGreedyPath;
  if (name == "consensus") return RejectRule::kBeamConsensus;
  throw Error("unknown reject rule: " + name);
}

std::string to_string(RejectRule rule) {
  return rule == RejectRule::kGreedyPath ? "greedy" : "consensus";
}

void RouteStats::merge(const RouteStats& other) {
  if (evals_per_level.size() < other.evals_per_level.size())
    evals_per_level.resize(other.evals_per_level.size(), 0);
  for (std::size_t i = 0; i < other.evals_per_level.size(); ++i)
    evals_per_level[i] += other.evals_per_level[i];
  routed += other.routed;
  rejected += other.rejected;
  dead_end += other.dead_end;
}

namespace {

struct Beam {
  int node = kEmptyChild;
  double probability = 0;
};

// Routing state of one query while it walks the levels.
struct QueryState {
  int query_index = -1;
  bool active = true;  // still descending (not rejected, beams alive)
  int greedy_node = 0;
  std::vector<Beam> beams;
  std::vector<RoutingSample> samples;           // one per split level, filled lazily
  std::vector<std::pair<int, int>> row_of;      // node id -> batch row, this level only
  RoutingResult result;
};

int find_row(const QueryState& q, int node) {
  for (const auto& [id, row] : q.row_of)
    if (id == node) return row;
  return -1;
}

}  // namespace

std::vector<RoutingResult> route_frame(const PartitionTree& tree, const NodeClassifier& classifier,
                                       const FrameCloud& frame,
                                       std::span<const int> query_indices, const RouteConfig& cfg,
                                       RouteStats* stats) {
  const int split_levels = tree.levels() - 1;
  if (classifier.split_levels() != split_levels)
    throw Error("route_frame: classifier level count does not match the tree");
  if (cfg.beam_width < 1) throw Error("route_frame: beam width must be positive");
  if (cfg.reject_rule == RejectRule::kBeamConsensus &&
      (cfg.consensus_threshold <= 0 || cfg.consensus_threshold > 1))
    throw Error("route_frame: consensus threshold must be in (0, 1]");

  // Boxes at one level are congruent, so the context ball radius is shared.
  std::vector<double> level_radius(split_levels);
  for (int l = 0; l < split_levels; ++l) {
    const auto at_level = tree.nodes_at_level(l);
    if (at_level.empty()) throw Error("route_frame: tree has no nodes at a split level");
    level_radius[l] = tree.node(at_level.front()).ball_radius;
  }

  const bool greedy = cfg.reject_rule == RejectRule::kGreedyPath;
  std::vector<QueryState> states(query_indices.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    states[i].query_index = query_indices[i];
    states[i].greedy_node = tree.root_id();
    states[i].beams = {{tree.root_id(), 1.0}};
    states[i].samples.resize(split_levels);
  }

  RouteStats local;
  local.evals_per_level.assign(split_levels, 0);

  for (int level = 0; level < split_levels; ++level) {
    // Gather the batch: per active query, its beam nodes plus (greedy rule)
    // the greedy-path node when the beams no longer contain it.
    std::vector<RoutingSample> batch_samples;
    std::vector<int> batch_nodes;
    std::vector<std::size_t> sample_owner;  // batch row -> state index

    for (std::size_t i = 0; i < states.size(); ++i) {
      QueryState& q = states[i];
      if (!q.active) continue;
      if (q.samples[level].context.empty()) {
        auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(i), level);
        q.samples[level] = make_routing_sample(frame, q.query_index, level_radius[level],
                                               classifier.context_n(level), rng);
      }
      q.row_of.clear();
      auto add_node = [&](int node) {
        if (find_row(q, node) >= 0) return;
        q.row_of.emplace_back(node, static_cast<int>(batch_samples.size()));
        batch_samples.push_back(q.samples[level]);
        batch_nodes.push_back(node);
        sample_owner.push_back(i);
      };
      for (const Beam& b : q.beams) add_node(b.node);
      if (greedy) add_node(q.greedy_node);
    }
    local.evals_per_level[level] += static_cast<std::int64_t>(batch_samples.size());

    MatX<float> probs;
    if (!batch_samples.empty()) {
      const std::size_t rows = batch_samples.size();
      std::vector<MatX<float>> parts(static_cast<std::size_t>(std::max(1, cfg.threads)));
      std::vector<std::size_t> part_lo(parts.size(), rows);
      parallel_chunks(0, rows, cfg.threads, [&](std::size_t lo, std::size_t hi, int w) {
        parts[w] = classifier.evaluate(level, std::span(batch_samples).subspan(lo, hi - lo),
                                       std::span(batch_nodes).subspan(lo, hi - lo));
        part_lo[w] = lo;
      });
      Eigen::Index cols = 0;
      for (const auto& p : parts)
        if (p.rows() > 0) cols = p.cols();
      probs.resize(rows, cols);
      for (std::size_t w = 0; w < parts.size(); ++w)
        if (part_lo[w] < rows) probs.middleRows(part_lo[w], parts[w].rows()) = parts[w];
    }

    const bool outlier_here = classifier.has_outlier_class(level);
    for (QueryState& q : states) {
      if (!q.active) continue;

      if (greedy) {
        const int row = find_row(q, q.greedy_node);
        const auto& node = tree.node(q.greedy_node);
        int best = 0;
        probs.row(row).maxCoeff(&best);
        if (outlier_here && best == static_cast<int>(node.children.size())) {
          q.active = false;
          q.result.status = RoutingResult::Status::kRejected;
          q.result.rejection_level = level;
          q.result.outlier_probability = probs(row, best);
          q.beams.clear();
          continue;
        }
        q.greedy_node = node.children[best];
      }

      // Expand beams into materialized children, renormalizing away any
      // outlier mass so path products stay comparable across levels.
      std::vector<Beam> next;
      double outlier_mass = 0;
      double beam_mass = 0;
      for (const Beam& b : q.beams) {
        const int row = find_row(q, b.node);
        const auto& node = tree.node(b.node);
        const int m = static_cast<int>(node.children.size());
        double child_mass = 0;
        for (int s = 0; s < m; ++s) child_mass += probs(row, s);
        if (outlier_here) {
          outlier_mass += b.probability * probs(row, m);
          beam_mass += b.probability;
        }
        if (child_mass <= 0) continue;  // all mass voted outlier
        for (int s = 0; s < m; ++s) {
          if (node.children[s] == kEmptyChild || probs(row, s) <= 0) continue;
          next.push_back({node.children[s], b.probability * probs(row, s) / child_mass});
        }
      }
      if (!greedy && outlier_here && beam_mass > 0 &&
          outlier_mass / beam_mass > cfg.consensus_threshold) {
        q.active = false;
        q.result.status = RoutingResult::Status::kRejected;
        q.result.rejection_level = level;
        q.result.outlier_probability = outlier_mass / beam_mass;
        q.beams.clear();
        continue;
      }
      std::sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) {
        if (a.probability != b.probability) return a.probability > b.probability;
        return a.node < b.node;
      });
      if (static_cast<int>(next.size()) > cfg.beam_width) next.resize(cfg.beam_width);
      q.beams = std::move(next);
      if (q.beams.empty()) {
        q.active = false;
        q.result.status = RoutingResult::Status::kDeadEnd;
      }
    }
  }

  std::vector<RoutingResult> results(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    QueryState& q = states[i];
    if (q.active) {
      q.result.status = RoutingResult::Status::kRouted;
      for (const Beam& b : q.beams) q.result.leaves.push_back({b.node, b.probability});
    }
    switch (q.result.status) {
      case RoutingResult::Status::kRouted: ++local.routed; break;
      case RoutingResult::Status::kRejected: ++local.rejected; break;
      case RoutingResult::Status::kDeadEnd: ++local.dead_end; break;
    }
    results[i] = std::move(q.result);
  }
  if (stats) stats->merge(local);
  return results;
}

RoutingResult route(const PartitionTree& tree, const NodeClassifier& classifier,
                    const FrameCloud& frame, int query_index, const RouteConfig& cfg,
                    RouteStats* stats) {
  const int indices[1] = {query_index};
  return route_frame(tree, classifier, frame, indices, cfg, stats).front();
}

}  // namespace nrt
