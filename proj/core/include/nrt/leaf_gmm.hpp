#pragma once

#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "nrt/geometry.hpp"
#include "nrt/partition_tree.hpp"

namespace nrt {

struct GaussianMode {
  Vec3 mean = Vec3::Zero();
  Mat3 covariance = Mat3::Identity();
  double weight = 1.0;  // fraction of leaf points assigned
  int support = 0;
};

struct LeafGMM {
  int leaf_id = kEmptyChild;
  std::vector<GaussianMode> modes;  // sorted by weight descending
  double bandwidth = 0;
};

struct GmmConfig {
  double bandwidth = 0.1;
  int max_modes = 10;
  int min_mode_support = 10;
  double cov_epsilon = 1e-6;
  int em_iterations = 1;  // assign-and-refit passes
  int seed_cap = 500;     // mean-shift starting points
};

// Gaussian-kernel mean shift started from a deterministic subsample of the
// points (lexicographically sorted, evenly strided, at most seed_cap seeds).
// Converged positions within bandwidth/2 merge into one mode; centers are
// basin averages ordered by population, ties by position.
std::vector<Vec3> mean_shift(std::span<const Vec3> points, double bandwidth, int seed_cap = 500);

LeafGMM fit_gmm(int leaf_id, std::span<const LeafPoint> points, const GmmConfig& cfg);

double mahalanobis(const Vec3& point, const GaussianMode& mode);

// Draws a world-space correspondence from a set of routed leaves: leaf chosen
// proportionally to its accumulated routing probability, mode within the leaf
// proportionally to its weight. Returns the mode mean plus the mode itself
// for later Mahalanobis scoring.
struct LeafChoice {
  const LeafGMM* gmm;
  double probability;
};
std::pair<Vec3, const GaussianMode*> sample_correspondence(std::span<const LeafChoice> leaves,
                                                           std::mt19937_64& rng);

// Tagged section appended to tree files.
void write_gmm_section(std::ostream& os, std::span<const LeafGMM> gmms);
std::vector<LeafGMM> read_gmm_section(std::istream& is);

void append_gmms(const std::filesystem::path& tree_path, std::span<const LeafGMM> gmms);
std::vector<LeafGMM> load_gmms(const std::filesystem::path& tree_path);

// Fits every leaf of the tree that holds enough points.
std::vector<LeafGMM> fit_leaf_gmms(const PartitionTree& tree, const GmmConfig& cfg,
                                   int threads = 1);

}  // namespace nrt
