#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nrt/config.hpp"
#include "nrt/dataset_io.hpp"
#include "nrt/evaluation.hpp"
#include "nrt/leaf_gmm.hpp"
#include "nrt/neural_net.hpp"
#include "nrt/partition_tree.hpp"
#include "nrt/pose_estimation.hpp"
#include "nrt/routing_features.hpp"
#include "nrt/routing_inference.hpp"
#include "nrt/scene_model.hpp"

namespace nrt {

// One tree with its per-level routing networks and leaf mixtures.
struct TrainedModel {
  PartitionTree tree;
  std::vector<LevelRouter<float>> routers;
  std::vector<LeafGMM> gmms;
  std::unordered_map<int, const LeafGMM*> gmm_index;

  void rebuild_index() { gmm_index = make_gmm_index(gmms); }
};

// Model directory: tree.nrtr (tree + GMM section) and router_<level>.nrwt.
void save_model(const TrainedModel& model, const std::filesystem::path& dir);
TrainedModel load_model(const std::filesystem::path& dir);

struct LevelTrainReport {
  int level = 0;
  int samples = 0;
  double final_loss = 0;
  double train_accuracy = 0;
  double holdout_accuracy = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<LevelTrainReport> levels;
  double gmm_seconds = 0;
  double total_seconds = 0;
};

// Camera-space clouds with ground-truth poses for every dataset frame.
std::vector<PosedFrameCloud> make_posed_clouds(const Dataset& dataset, int normal_k,
                                               int threads);

WorldPointCloud fuse_dataset(const Dataset& dataset, const PipelineConfig& cfg, int threads);

// Tree construction, per-level routing training with holdout evaluation, and
// leaf GMM fitting. `strategy` overrides cfg.tree.strategy so forest arms can
// share one config.
TrainedModel train_model(const WorldPointCloud& cloud, std::span<const PosedFrameCloud> frames,
                         const PipelineConfig& cfg, BoxStrategy strategy, int threads,
                         TrainReport* report = nullptr);

// Per-level sample budget split across the level's nodes by coverage.
std::vector<LabeledSample> draw_level_samples(const TrainingSetBuilder& builder, int level,
                                              int total, int inlier_ratio, int context_n,
                                              bool outlier_labels, std::uint64_t seed);

struct BenchmarkRun {
  std::vector<FrameResult> frames;
  std::vector<TrajectoryEntry> trajectory;
  BenchmarkSummary summary;
  RejectionCounts rejections;
  RejectionReport rejection;
  double seconds = 0;
};

// Localizes and scores every test frame. `models` holds one entry for a
// single tree or several for a forest; `scene` enables ICP when the config
// asks for it. Frame seeds derive from cfg.localize.seed and the frame id.
BenchmarkRun run_benchmark(const Dataset& test, std::span<const TrainedModel> models,
                           const PipelineConfig& cfg, const WorldPointCloud* scene, int threads,
                           int max_frames = -1);

// Renders the train or test sequence of the configured synthetic scene.
std::vector<RenderedFrame> render_sequence(const SceneSpec& spec, const PipelineConfig& cfg,
                                           RenderPhase phase, int threads);

}  // namespace nrt
