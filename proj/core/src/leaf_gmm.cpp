#include "nrt/leaf_gmm.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nrt/binary_io.hpp"
#include "nrt/error.hpp"
#include "nrt/grid.hpp"
#include "nrt/parallel.hpp"

namespace nrt {

namespace {

constexpr char kGmmMagic[4] = {'G', 'M', 'M', 'S'};
constexpr std::uint32_t kGmmVersion = 2;

bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x() != b.x()) return a.x() < b.x();
  if (a.y() != b.y()) return a.y() < b.y();
  return a.z() < b.z();
}

}  // namespace

std::vector<Vec3> mean_shift(std::span<const Vec3> points, double bandwidth, int seed_cap) {
  if (points.empty()) throw Error("mean_shift: empty input");
  if (bandwidth <= 0) throw Error("mean_shift: bandwidth must be positive");

  // Seed order must not depend on input order for permutation invariance.
  std::vector<Vec3> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(), lex_less);
  std::vector<Vec3> seeds;
  const std::size_t stride = std::max<std::size_t>(1, sorted.size() / std::max(1, seed_cap));
  for (std::size_t i = 0; i < sorted.size(); i += stride) seeds.push_back(sorted[i]);

  VoxelGrid grid(sorted, bandwidth);
  const double support_radius = 3.0 * bandwidth;
  const double inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);

  std::vector<Vec3> converged(seeds.size());
  std::vector<int> neighbours;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    Vec3 y = seeds[s];
    for (int iter = 0; iter < 100; ++iter) {
      grid.radius_query(y, support_radius, neighbours);
      Vec3 num = Vec3::Zero();
      double den = 0;
      for (int idx : neighbours) {
        const double w = std::exp(-(sorted[idx] - y).squaredNorm() * inv_2h2);
        num += w * sorted[idx];
        den += w;
      }
      if (den <= 0) break;  // isolated seed, keep position
      const Vec3 next = num / den;
      const double step = (next - y).norm();
      y = next;
      if (step < 1e-4 * bandwidth) break;
    }
    converged[s] = y;
  }

  // Cluster converged positions; basin centers are member averages.
  struct Basin {
    Vec3 sum = Vec3::Zero();
    int count = 0;
    Vec3 center() const { return sum / count; }
  };
  std::vector<Basin> basins;
  const double merge_radius = bandwidth / 2.0;
  for (const Vec3& y : converged) {
    int best = -1;
    double best_dist = merge_radius;
    for (std::size_t b = 0; b < basins.size(); ++b) {
      const double d = (basins[b].center() - y).norm();
      if (d <= best_dist) {
        best = static_cast<int>(b);
        best_dist = d;
      }
    }
    if (best < 0) {
      basins.push_back({y, 1});
    } else {
      basins[best].sum += y;
      basins[best].count += 1;
    }
  }
  std::sort(basins.begin(), basins.end(), [](const Basin& a, const Basin& b) {
    if (a.count != b.count) return a.count > b.count;
    return lex_less(a.center(), b.center());
  });
  std::vector<Vec3> modes;
  modes.reserve(basins.size());
  for (const Basin& b : basins) modes.push_back(b.center());
  return modes;
}

LeafGMM fit_gmm(int leaf_id, std::span<const LeafPoint> points, const GmmConfig& cfg) {
  if (points.empty()) throw Error("fit_gmm: empty leaf");
  std::vector<Vec3> positions(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) positions[i] = points[i].position;

  std::vector<Vec3> centers = mean_shift(positions, cfg.bandwidth, cfg.seed_cap);
  if (centers.empty()) throw Error("fit_gmm: mean shift produced no modes");

  std::vector<int> assign(positions.size(), 0);
  auto assign_nearest_center = [&] {
    for (std::size_t i = 0; i < positions.size(); ++i) {
      int best = 0;
      double best_d = (positions[i] - centers[0]).squaredNorm();
      for (std::size_t c = 1; c < centers.size(); ++c) {
        const double d = (positions[i] - centers[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      assign[i] = best;
    }
  };

  struct Fit {
    Vec3 mean = Vec3::Zero();
    Mat3 cov = Mat3::Zero();
    int support = 0;
  };
  auto refit = [&](std::size_t mode_count) {
    std::vector<Fit> fits(mode_count);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      fits[assign[i]].mean += positions[i];
      fits[assign[i]].support += 1;
    }
    for (Fit& f : fits)
      if (f.support > 0) f.mean /= f.support;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const Vec3 d = positions[i] - fits[assign[i]].mean;
      fits[assign[i]].cov += d * d.transpose();
    }
    for (Fit& f : fits)
      if (f.support > 0) f.cov /= f.support;
    return fits;
  };

  assign_nearest_center();
  std::vector<Fit> fits = refit(centers.size());

  for (int pass = 1; pass < cfg.em_iterations; ++pass) {
    // Optional extra hard-EM passes: reassign by Mahalanobis under the
    // current fits, then refit.
    std::vector<Mat3> inv(fits.size());
    for (std::size_t c = 0; c < fits.size(); ++c) {
      Mat3 cov = fits[c].cov + cfg.cov_epsilon * Mat3::Identity();
      inv[c] = cov.inverse();
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < fits.size(); ++c) {
        if (fits[c].support == 0) continue;
        const Vec3 d = positions[i] - fits[c].mean;
        const double m = d.dot(inv[c] * d);
        if (m < best_d) {
          best_d = m;
          best = static_cast<int>(c);
        }
      }
      assign[i] = best;
    }
    fits = refit(fits.size());
  }

  // Merge starved modes into their nearest surviving neighbour, then cap the
  // mode count, reassigning dropped members.
  auto merge_into_survivors = [&](auto keep_predicate) {
    std::vector<int> remap(fits.size(), -1);
    std::vector<int> survivors;
    for (std::size_t c = 0; c < fits.size(); ++c)
      if (keep_predicate(c)) survivors.push_back(static_cast<int>(c));
    if (survivors.empty()) {
      // Degenerate: everything starved; collapse to the best-supported mode.
      int best = 0;
      for (std::size_t c = 1; c < fits.size(); ++c)
        if (fits[c].support > fits[best].support) best = static_cast<int>(c);
      survivors.push_back(best);
    }
    for (std::size_t c = 0; c < fits.size(); ++c) {
      if (std::find(survivors.begin(), survivors.end(), static_cast<int>(c)) != survivors.end())
        continue;
      remap[c] = -1;
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const int c = assign[i];
      if (std::find(survivors.begin(), survivors.end(), c) != survivors.end()) continue;
      int best = survivors[0];
      double best_d = (positions[i] - fits[best].mean).squaredNorm();
      for (int s : survivors) {
        const double d = (positions[i] - fits[s].mean).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      assign[i] = best;
    }
    // Compact mode indices in survivor order.
    std::vector<int> compact(fits.size(), -1);
    for (std::size_t s = 0; s < survivors.size(); ++s) compact[survivors[s]] = static_cast<int>(s);
    for (std::size_t i = 0; i < positions.size(); ++i) assign[i] = compact[assign[i]];
    fits = refit(survivors.size());
  };

  // Iterate the support merge until stable (merging can starve other modes'
  // neighbours only by adding members, so one pass usually suffices).
  for (;;) {
    bool all_ok = true;
    for (const Fit& f : fits)
      if (f.support > 0 && f.support < cfg.min_mode_support) all_ok = false;
    if (all_ok || fits.size() == 1) break;
    merge_into_survivors([&](std::size_t c) { return fits[c].support >= cfg.min_mode_support; });
  }
  if (static_cast<int>(fits.size()) > cfg.max_modes) {
    std::vector<std::size_t> order(fits.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return fits[a].support > fits[b].support; });
    std::vector<bool> keep(fits.size(), false);
    for (int i = 0; i < cfg.max_modes; ++i) keep[order[i]] = true;
    merge_into_survivors([&](std::size_t c) { return keep[c]; });
  }

  LeafGMM gmm;
  gmm.leaf_id = leaf_id;
  gmm.bandwidth = cfg.bandwidth;
  const double total = static_cast<double>(positions.size());
  for (const Fit& f : fits) {
    if (f.support == 0) continue;
    GaussianMode mode;
    mode.mean = f.mean;
    mode.covariance = f.cov + cfg.cov_epsilon * Mat3::Identity();
    mode.weight = f.support / total;
    mode.support = f.support;
    gmm.modes.push_back(mode);
  }
  std::sort(gmm.modes.begin(), gmm.modes.end(), [](const GaussianMode& a, const GaussianMode& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return lex_less(a.mean, b.mean);
  });
  return gmm;
}

double mahalanobis(const Vec3& point, const GaussianMode& mode) {
  Eigen::LLT<Mat3> llt(mode.covariance);
  if (llt.info() != Eigen::Success) throw Error("mahalanobis: covariance not positive definite");
  const Vec3 d = point - mode.mean;
  const Vec3 y = llt.matrixL().solve(d);
  return y.norm();
}

std::pair<Vec3, const GaussianMode*> sample_correspondence(std::span<const LeafChoice> leaves,
                                                           std::mt19937_64& rng) {
  double total = 0;
  for (const LeafChoice& c : leaves)
    if (c.gmm && !c.gmm->modes.empty()) total += c.probability;
  if (total <= 0) throw Error("sample_correspondence: no fitted GMM among routed leaves");

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  double r = uniform(rng) * total;
  const LeafGMM* chosen = nullptr;
  for (const LeafChoice& c : leaves) {
    if (!c.gmm || c.gmm->modes.empty()) continue;
    chosen = c.gmm;
    r -= c.probability;
    if (r <= 0) break;
  }

  double wsum = 0;
  for (const GaussianMode& m : chosen->modes) wsum += m.weight;
  double rw = uniform(rng) * wsum;
  const GaussianMode* mode = &chosen->modes.back();
  for (const GaussianMode& m : chosen->modes) {
    rw -= m.weight;
    if (rw <= 0) {
      mode = &m;
      break;
    }
  }
  return {mode->mean, mode};
}

void write_gmm_section(std::ostream& os, std::span<const LeafGMM> gmms) {
  io::write_magic(os, kGmmMagic);
  io::write_scalar<std::uint32_t>(os, kGmmVersion);
  io::write_scalar<std::uint64_t>(os, gmms.size());
  for (const LeafGMM& g : gmms) {
    io::write_scalar<std::int32_t>(os, g.leaf_id);
    io::write_scalar<double>(os, g.bandwidth);
    io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(g.modes.size()));
    for (const GaussianMode& m : g.modes) {
      for (int i = 0; i < 3; ++i) io::write_scalar<double>(os, m.mean[i]);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) io::write_scalar<double>(os, m.covariance(r, c));
      io::write_scalar<double>(os, m.weight);
      io::write_scalar<std::int32_t>(os, m.support);
    }
  }
}

std::vector<LeafGMM> read_gmm_section(std::istream& is) {
  io::expect_magic(is, kGmmMagic, "GMM section");
  if (io::read_scalar<std::uint32_t>(is, "GMM version") != kGmmVersion)
    throw Error("GMM section: unsupported version");
  const auto count = io::read_scalar<std::uint64_t>(is, "GMM count");
  std::vector<LeafGMM> gmms(count);
  for (LeafGMM& g : gmms) {
    g.leaf_id = io::read_scalar<std::int32_t>(is, "GMM leaf id");
    g.bandwidth = io::read_scalar<double>(is, "GMM bandwidth");
    const auto modes = io::read_scalar<std::uint32_t>(is, "GMM mode count");
    g.modes.resize(modes);
    for (GaussianMode& m : g.modes) {
      for (int i = 0; i < 3; ++i) m.mean[i] = io::read_scalar<double>(is, "mode mean");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m.covariance(r, c) = io::read_scalar<double>(is, "mode cov");
      m.weight = io::read_scalar<double>(is, "mode weight");
      m.support = io::read_scalar<std::int32_t>(is, "mode support");
    }
  }
  return gmms;
}

void append_gmms(const std::filesystem::path& tree_path, std::span<const LeafGMM> gmms) {
  std::ofstream os(tree_path, std::ios::binary | std::ios::app);
  if (!os) throw Error("append_gmms: cannot open " + tree_path.string());
  write_gmm_section(os, gmms);
  if (!os) throw Error("append_gmms: write failed for " + tree_path.string());
}

std::vector<LeafGMM> load_gmms(const std::filesystem::path& tree_path) {
  std::ifstream is(tree_path, std::ios::binary);
  if (!is) throw Error("load_gmms: cannot open " + tree_path.string());
  PartitionTree::deserialize(is);  // skip over the tree payload
  return read_gmm_section(is);
}

std::vector<LeafGMM> fit_leaf_gmms(const PartitionTree& tree, const GmmConfig& cfg, int threads) {
  std::vector<int> leaves;
  for (const TreeNode& n : tree.nodes())
    if (n.is_leaf() && !n.leaf_points.empty()) leaves.push_back(n.id);
  std::vector<LeafGMM> gmms(leaves.size());
  parallel_for(0, leaves.size(), threads, [&](std::size_t i) {
    const TreeNode& n = tree.node(leaves[i]);
    gmms[i] = fit_gmm(n.id, n.leaf_points, cfg);
  });
  return gmms;
}

}  // namespace nrt
