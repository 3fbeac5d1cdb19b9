#include "nrt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "nrt/error.hpp"
#include "nrt/parallel.hpp"
#include "nrt/rng.hpp"
#include "nrt/synth_scene.hpp"

namespace nrt {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void save_model(const TrainedModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto tree_path = dir / "tree.nrtr";
  save_tree(model.tree, tree_path);
  append_gmms(tree_path, model.gmms);
  for (const auto& router : model.routers)
    save_router(router, dir / ("router_" + std::to_string(router.level()) + ".nrwt"));
}

TrainedModel load_model(const std::filesystem::path& dir) {
  TrainedModel model;
  const auto tree_path = dir / "tree.nrtr";
  model.tree = load_tree(tree_path);
  model.gmms = load_gmms(tree_path);
  const int split_levels = model.tree.levels() - 1;
  model.routers.reserve(split_levels);
  for (int l = 0; l < split_levels; ++l) {
    const auto path = dir / ("router_" + std::to_string(l) + ".nrwt");
    if (!std::filesystem::exists(path))
      throw Error("load_model: missing routing network " + path.string());
    model.routers.push_back(load_router(path));
  }
  model.rebuild_index();
  return model;
}

std::vector<PosedFrameCloud> make_posed_clouds(const Dataset& dataset, int normal_k,
                                               int threads) {
  std::vector<PosedFrameCloud> clouds(dataset.frames.size());
  parallel_for(0, dataset.frames.size(), threads, [&](std::size_t i) {
    const DatasetFrame& f = dataset.frames[i];
    clouds[i].cloud = make_frame_cloud(&f.color, f.depth, dataset.intrinsics, normal_k);
    clouds[i].pose = f.pose;
  });
  return clouds;
}

WorldPointCloud fuse_dataset(const Dataset& dataset, const PipelineConfig& cfg, int threads) {
  std::vector<FuseFrame> frames(dataset.frames.size());
  for (std::size_t i = 0; i < dataset.frames.size(); ++i) {
    frames[i].color = &dataset.frames[i].color;
    frames[i].depth = &dataset.frames[i].depth;
    frames[i].pose = dataset.frames[i].pose;
    frames[i].intrinsics = dataset.intrinsics;
  }
  return fuse(frames, cfg.fuse.voxel, threads, cfg.fuse.normal_k);
}

std::vector<LabeledSample> draw_level_samples(const TrainingSetBuilder& builder, int level,
                                              int total, int inlier_ratio, int context_n,
                                              bool outlier_labels, std::uint64_t seed) {
  const std::vector<int> nodes = builder.tree().nodes_at_level(level);
  std::vector<int> covered;
  std::int64_t coverage_sum = 0;
  for (int id : nodes) {
    const int c = builder.coverage(id);
    if (c > 0) {
      covered.push_back(id);
      coverage_sum += c;
    }
  }
  if (covered.empty()) throw Error("draw_level_samples: no frame pixels reach level " +
                                   std::to_string(level));
  std::vector<LabeledSample> samples;
  samples.reserve(total + covered.size());
  for (int id : covered) {
    const int share = static_cast<int>(
        std::max<std::int64_t>(1, static_cast<std::int64_t>(total) * builder.coverage(id) /
                                      coverage_sum));
    // Without outlier labels every sample must be an inlier; a ratio equal to
    // the request size makes the outlier share round down to zero.
    const int ratio = outlier_labels ? inlier_ratio : share;
    auto batch = builder.make_training_set(id, share, ratio, context_n, seed);
    samples.insert(samples.end(), std::make_move_iterator(batch.begin()),
                   std::make_move_iterator(batch.end()));
  }
  return samples;
}

TrainedModel train_model(const WorldPointCloud& cloud, std::span<const PosedFrameCloud> frames,
                         const PipelineConfig& cfg, BoxStrategy strategy, int threads,
                         TrainReport* report) {
  const auto t_total = std::chrono::steady_clock::now();
  cfg.validate();

  TrainedModel model;
  const RootBox root = root_box(cloud, strategy);
  model.tree = build_tree(cloud, root, cfg.tree.levels, cfg.tree.branching,
                          cfg.tree.min_leaf_points, strategy);

  TrainingSetBuilder builder(frames, model.tree);
  const NetShape shape = cfg.net_shape();
  const int split_levels = model.tree.levels() - 1;
  for (int level = 0; level < split_levels; ++level) {
    const auto t_level = std::chrono::steady_clock::now();
    const bool outliers_here = cfg.network.outlier_labels && level >= 1;
    std::vector<LabeledSample> samples =
        draw_level_samples(builder, level, cfg.train.samples_per_level, cfg.train.inlier_ratio,
                           cfg.network.context_n, outliers_here,
                           mix_seed(cfg.train.seed, 0x73616d706c65ull, level));
    auto shuffle_rng = make_rng(cfg.train.seed, 0x73706c6974ull, level);
    std::shuffle(samples.begin(), samples.end(), shuffle_rng);
    const std::size_t holdout =
        std::max<std::size_t>(1, static_cast<std::size_t>(samples.size() * cfg.train.holdout));
    const std::span<const LabeledSample> eval_split(samples.data(), holdout);
    const std::span<const LabeledSample> train_split(samples.data() + holdout,
                                                     samples.size() - holdout);

    LevelRouter<float> router = LevelRouter<float>::for_level(
        model.tree, level, shape, cfg.network.context_n, cfg.network.hypernetwork, outliers_here,
        mix_seed(cfg.train.seed, 0x696e6974ull, level));
    const TrainLog log = router.train(train_split, cfg.train_config());
    if (report) {
      LevelTrainReport lr;
      lr.level = level;
      lr.samples = static_cast<int>(samples.size());
      lr.final_loss = log.loss.empty() ? 0 : log.loss.back();
      lr.train_accuracy = log.accuracy.empty() ? 0 : log.accuracy.back();
      lr.holdout_accuracy = router.evaluate(eval_split).second;
      lr.seconds = seconds_since(t_level);
      report->levels.push_back(lr);
    }
    model.routers.push_back(std::move(router));
  }

  const auto t_gmm = std::chrono::steady_clock::now();
  model.gmms = fit_leaf_gmms(model.tree, cfg.gmm_config(), threads);
  model.rebuild_index();
  if (report) {
    report->gmm_seconds = seconds_since(t_gmm);
    report->total_seconds = seconds_since(t_total);
  }
  return model;
}

BenchmarkRun run_benchmark(const Dataset& test, std::span<const TrainedModel> models,
                           const PipelineConfig& cfg, const WorldPointCloud* scene, int threads,
                           int max_frames) {
  if (models.empty()) throw Error("run_benchmark: no models");
  const auto t_total = std::chrono::steady_clock::now();

  std::vector<TrainedClassifier> classifiers;
  classifiers.reserve(models.size());
  for (const TrainedModel& m : models) classifiers.emplace_back(m.routers);
  std::vector<ModelArm> arms(models.size());
  for (std::size_t i = 0; i < models.size(); ++i)
    arms[i] = {&models[i].tree, &classifiers[i], &models[i].gmm_index};

  std::optional<SceneIndex> scene_index;
  if (scene && cfg.ransac.icp) scene_index.emplace(*scene);

  const int n = max_frames < 0
                    ? static_cast<int>(test.frames.size())
                    : std::min<int>(max_frames, static_cast<int>(test.frames.size()));
  BenchmarkRun run;
  for (int f = 0; f < n; ++f) {
    const DatasetFrame& frame = test.frames[f];
    const auto t_frame = std::chrono::steady_clock::now();
    const FrameCloud cloud =
        make_frame_cloud(&frame.color, frame.depth, test.intrinsics, cfg.fuse.normal_k);

    LocalizeConfig lc;
    lc.route = cfg.route_config(threads);
    lc.ransac = cfg.ransac_config(threads);
    lc.query_count = cfg.localize.query_count;
    lc.seed = mix_seed(cfg.localize.seed, 0x6672616d65ull, f);
    lc.threads = threads;
    const LocalizeResult loc =
        localize_frame(cloud, arms, scene_index ? &*scene_index : nullptr, lc);

    FrameResult fr;
    fr.frame_id = f;
    fr.valid = loc.valid;
    fr.ground_truth = frame.pose;
    fr.rejection_rate = loc.diagnostics.rejection_rate;
    fr.seconds = seconds_since(t_frame);
    if (loc.valid) {
      fr.predicted = loc.pose;
      const PoseError err = pose_error(loc.pose, frame.pose);
      fr.translation_error = err.translation_m;
      fr.rotation_error = err.rotation_deg;
      fr.dcre_value = dcre(frame.depth, test.intrinsics, frame.pose, loc.pose);
    }
    run.frames.push_back(fr);
    run.trajectory.push_back({f, loc.valid, loc.valid ? loc.pose : SE3Pose()});
    if (frame.has_mask)
      run.rejections.merge(count_rejections(loc.diagnostics.first_arm_routing,
                                            loc.diagnostics.query_indices, cloud, frame.mask));
  }
  run.summary = summarize(run.frames);
  run.rejection = rejection_report(run.rejections);
  run.seconds = seconds_since(t_total);
  return run;
}

std::vector<RenderedFrame> render_sequence(const SceneSpec& spec, const PipelineConfig& cfg,
                                           RenderPhase phase, int threads) {
  const bool test = phase == RenderPhase::kTest;
  const int n = test ? cfg.scene.test_frames : cfg.scene.train_frames;
  const CameraIntrinsics intr = cfg.intrinsics();
  const std::vector<SE3Pose> poses =
      generate_trajectory(spec, n, mix_seed(cfg.scene.seed, test ? 2u : 1u));

  std::vector<RenderedFrame> frames(n);
  parallel_for(0, frames.size(), threads, [&](std::size_t i) {
    RenderOptions opts;
    if (test) {
      auto rng = make_rng(cfg.scene.seed, 0x696c6c756dull, i);
      opts.illumination = cfg.scene.illumination_min +
                          (cfg.scene.illumination_max - cfg.scene.illumination_min) *
                              std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    }
    opts.depth_noise_sigma = cfg.scene.depth_noise;
    opts.noise_seed = mix_seed(cfg.scene.seed, 0x6e6f697365ull, i);
    frames[i] = render(spec, poses[i], intr, phase, opts);
  });
  return frames;
}

}  // namespace nrt
