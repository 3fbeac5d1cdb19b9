// nrt: synthesize data, fuse, build trees, train routing networks, localize,
// evaluate, and run the ablation matrix. Stages communicate through files;
// every stage writes the effective configuration next to its outputs.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "nrt/config.hpp"
#include "nrt/error.hpp"
#include "nrt/pipeline.hpp"
#include "nrt/synth_scene.hpp"

namespace fs = std::filesystem;
using nrt::PipelineConfig;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct ConfigError {
  std::string message;
};

struct Globals {
  std::string profile = "desk";
  std::string config_file;
  std::vector<std::string> sets;
  int threads = 0;  // 0: hardware concurrency
};

int effective_threads(const Globals& g) {
  if (g.threads > 0) return g.threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

PipelineConfig resolve_config(const Globals& g) {
  try {
    PipelineConfig cfg = nrt::config_profile(g.profile);
    if (!g.config_file.empty()) cfg = nrt::load_config(g.config_file, cfg);
    for (const std::string& kv : g.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw nrt::Error("--set expects section.key=value, got '" + kv + "'");
      nrt::config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  } catch (const nrt::Error& e) {
    throw ConfigError{e.what()};
  }
}

void require_input(const fs::path& path, const std::string& what, const std::string& hint) {
  if (!fs::exists(path))
    throw nrt::Error(what + " not found: " + path.string() + " (" + hint + ")");
}

nrt::Dataset load_dataset_dir(const fs::path& dir, const std::string& hint) {
  require_input(dir, "dataset directory", hint);
  require_input(dir / "intrinsics.txt", "dataset intrinsics", hint);
  return nrt::load_dataset(dir);
}

// ---------------------------------------------------------------- synth

int run_synth(const Globals& g, const std::string& out) {
  const PipelineConfig cfg = resolve_config(g);
  const int threads = effective_threads(g);
  const fs::path dir(out);

  const nrt::SceneSpec scene = nrt::generate_scene(cfg.scene.seed, cfg.scene.complexity);
  const auto train = nrt::render_sequence(scene, cfg, nrt::RenderPhase::kTrain, threads);
  const auto test = nrt::render_sequence(scene, cfg, nrt::RenderPhase::kTest, threads);
  nrt::save_rendered_dataset(dir / "train", cfg.intrinsics(), scene, train, false);
  nrt::save_rendered_dataset(dir / "test", cfg.intrinsics(), scene, test, true);
  nrt::save_config(cfg, dir / "effective-config.txt");

  std::printf("scene: %zu boxes (%d dynamic), seed %llu\n", scene.boxes.size(),
              scene.dynamic_count(), static_cast<unsigned long long>(cfg.scene.seed));
  std::printf("wrote %zu train + %zu test frames to %s\n", train.size(), test.size(),
              dir.string().c_str());
  return 0;
}

// ----------------------------------------------------------------- fuse

int run_fuse(const Globals& g, const std::string& data, const std::string& out) {
  const PipelineConfig cfg = resolve_config(g);
  const nrt::Dataset dataset = load_dataset_dir(data, "run `nrt synth` first");
  const nrt::WorldPointCloud cloud = nrt::fuse_dataset(dataset, cfg, effective_threads(g));

  const fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  nrt::save_cloud(cloud, out_path);
  nrt::save_config(cfg, out_path.string() + ".config");
  std::printf("fused %zu frames into %zu points (voxel %.3f) -> %s\n", dataset.frames.size(),
              cloud.points.size(), cfg.fuse.voxel, out_path.string().c_str());
  return 0;
}

// ----------------------------------------------------------- build-tree

int run_build_tree(const Globals& g, const std::string& cloud_path, const std::string& out) {
  const PipelineConfig cfg = resolve_config(g);
  require_input(cloud_path, "fused cloud", "run `nrt fuse` first");
  const nrt::WorldPointCloud cloud = nrt::load_cloud(cloud_path);
  const nrt::BoxStrategy strategy = cfg.tree_strategy();
  const nrt::PartitionTree tree =
      nrt::build_tree(cloud, nrt::root_box(cloud, strategy), cfg.tree.levels, cfg.tree.branching,
                      cfg.tree.min_leaf_points, strategy);

  const fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  nrt::save_tree(tree, out_path);
  nrt::save_config(cfg, out_path.string() + ".config");

  std::printf("tree (%s, t=%d, m=%d): %d nodes, %d split, %d leaves\n",
              std::string(nrt::to_string(strategy)).c_str(), tree.levels(), tree.branching(),
              tree.node_count(), tree.split_node_count(), tree.leaf_node_count());
  for (int l = 0; l < tree.levels(); ++l)
    std::printf("  level %d: %zu nodes\n", l, tree.nodes_at_level(l).size());
  return 0;
}

// ---------------------------------------------------------------- train

void print_train_report(const nrt::TrainReport& report) {
  for (const nrt::LevelTrainReport& lr : report.levels)
    std::printf("  level %d: %d samples, loss %.4f, train acc %.3f, holdout acc %.3f (%.1fs)\n",
                lr.level, lr.samples, lr.final_loss, lr.train_accuracy, lr.holdout_accuracy,
                lr.seconds);
  std::printf("  gmm fit %.1fs, total %.1fs\n", report.gmm_seconds, report.total_seconds);
}

void write_train_report(const nrt::TrainReport& report, const fs::path& path) {
  std::string text;
  char line[160];
  for (const nrt::LevelTrainReport& lr : report.levels) {
    std::snprintf(line, sizeof line,
                  "level=%d samples=%d loss=%.6f train_acc=%.6f holdout_acc=%.6f seconds=%.2f\n",
                  lr.level, lr.samples, lr.final_loss, lr.train_accuracy, lr.holdout_accuracy,
                  lr.seconds);
    text += line;
  }
  std::snprintf(line, sizeof line, "gmm_seconds=%.2f\ntotal_seconds=%.2f\n", report.gmm_seconds,
                report.total_seconds);
  text += line;
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw nrt::Error("cannot write " + path.string());
  std::fputs(text.c_str(), f);
  std::fclose(f);
}

int run_train(const Globals& g, const std::string& data, const std::string& cloud_path,
              const std::string& out) {
  const PipelineConfig cfg = resolve_config(g);
  const int threads = effective_threads(g);
  const nrt::Dataset dataset = load_dataset_dir(data, "run `nrt synth` first");

  nrt::WorldPointCloud cloud;
  if (cloud_path.empty()) {
    cloud = nrt::fuse_dataset(dataset, cfg, threads);
  } else {
    require_input(cloud_path, "fused cloud", "run `nrt fuse` first or drop --cloud to fuse here");
    cloud = nrt::load_cloud(cloud_path);
  }
  const std::vector<nrt::PosedFrameCloud> posed =
      nrt::make_posed_clouds(dataset, cfg.fuse.normal_k, threads);

  const fs::path dir(out);
  fs::create_directories(dir);
  // A forest trains one arm per root-box strategy; a single tree uses the
  // configured strategy alone.
  std::vector<nrt::BoxStrategy> strategies;
  if (cfg.tree.forest)
    strategies = {nrt::BoxStrategy::kOriginal, nrt::BoxStrategy::kCompact,
                  nrt::BoxStrategy::kRot30, nrt::BoxStrategy::kRot60};
  else
    strategies = {cfg.tree_strategy()};

  for (std::size_t a = 0; a < strategies.size(); ++a) {
    const fs::path arm_dir = cfg.tree.forest ? dir / ("arm_" + std::to_string(a)) : dir;
    std::printf("training %s tree (%zu/%zu)\n",
                std::string(nrt::to_string(strategies[a])).c_str(), a + 1, strategies.size());
    nrt::TrainReport report;
    const nrt::TrainedModel model =
        nrt::train_model(cloud, posed, cfg, strategies[a], threads, &report);
    nrt::save_model(model, arm_dir);
    write_train_report(report, arm_dir / "train-report.txt");
    print_train_report(report);
  }
  nrt::save_config(cfg, dir / "effective-config.txt");
  std::printf("model written to %s\n", dir.string().c_str());
  return 0;
}

// ------------------------------------------------------------- localize

std::vector<nrt::TrainedModel> load_models(const fs::path& model_dir) {
  require_input(model_dir, "model directory", "run `nrt train` first");
  std::vector<nrt::TrainedModel> models;
  if (fs::exists(model_dir / "arm_0")) {
    for (int a = 0; fs::exists(model_dir / ("arm_" + std::to_string(a))); ++a)
      models.push_back(nrt::load_model(model_dir / ("arm_" + std::to_string(a))));
  } else {
    require_input(model_dir / "tree.nrtr", "trained tree", "run `nrt train` first");
    models.push_back(nrt::load_model(model_dir));
  }
  return models;
}

void write_benchmark(const nrt::BenchmarkRun& run, const fs::path& dir) {
  fs::create_directories(dir);
  nrt::write_trajectory(run.trajectory, dir / "trajectory.txt");
  nrt::write_frame_csv(run.frames, dir / "frames.csv");
  nrt::write_summary_kv(run.summary, &run.rejection, dir / "summary.txt");
}

int run_localize(const Globals& g, const std::string& data, const std::string& model,
                 const std::string& cloud_path, const std::string& out, int max_frames) {
  const PipelineConfig cfg = resolve_config(g);
  const int threads = effective_threads(g);
  const nrt::Dataset dataset = load_dataset_dir(data, "run `nrt synth` first (pass the test split)");
  const std::vector<nrt::TrainedModel> models = load_models(model);

  nrt::WorldPointCloud scene_cloud;
  const nrt::WorldPointCloud* scene = nullptr;
  if (cfg.ransac.icp) {
    if (cloud_path.empty())
      throw nrt::Error("ransac.icp is enabled but no --cloud was given "
                       "(pass the fused cloud from `nrt fuse`)");
    require_input(cloud_path, "fused cloud", "run `nrt fuse` first");
    scene_cloud = nrt::load_cloud(cloud_path);
    scene = &scene_cloud;
  }

  const nrt::BenchmarkRun run =
      nrt::run_benchmark(dataset, models, cfg, scene, threads, max_frames);
  write_benchmark(run, out);
  nrt::save_config(cfg, fs::path(out) / "effective-config.txt");
  std::fputs(nrt::summary_table(run.summary, &run.rejection).c_str(), stdout);
  std::printf("%zu frames in %.1fs -> %s\n", run.frames.size(), run.seconds, out.c_str());
  return 0;
}

// ------------------------------------------------------------- evaluate

int run_evaluate(const Globals& g, const std::string& data, const std::string& trajectory,
                 const std::string& out) {
  resolve_config(g);  // validates profile/overrides even though none apply here
  const nrt::Dataset dataset = load_dataset_dir(data, "run `nrt synth` first (pass the test split)");
  require_input(trajectory, "trajectory file", "run `nrt localize` first");

  std::vector<nrt::FrameResult> frames;
  for (const nrt::TrajectoryEntry& entry : nrt::read_trajectory(trajectory)) {
    if (entry.frame_id < 0 || entry.frame_id >= static_cast<int>(dataset.frames.size()))
      throw nrt::Error("trajectory frame " + std::to_string(entry.frame_id) +
                       " outside dataset of " + std::to_string(dataset.frames.size()) + " frames");
    const nrt::DatasetFrame& gt = dataset.frames[entry.frame_id];
    nrt::FrameResult fr;
    fr.frame_id = entry.frame_id;
    fr.valid = entry.valid;
    fr.ground_truth = gt.pose;
    if (entry.valid) {
      fr.predicted = entry.pose;
      const nrt::PoseError err = nrt::pose_error(entry.pose, gt.pose);
      fr.translation_error = err.translation_m;
      fr.rotation_error = err.rotation_deg;
      fr.dcre_value = nrt::dcre(gt.depth, dataset.intrinsics, gt.pose, entry.pose);
    }
    frames.push_back(fr);
  }
  const nrt::BenchmarkSummary summary = nrt::summarize(frames);
  std::fputs(nrt::summary_table(summary).c_str(), stdout);
  if (!out.empty()) {
    fs::create_directories(out);
    nrt::write_summary_kv(summary, nullptr, fs::path(out) / "summary.txt");
    nrt::write_frame_csv(frames, fs::path(out) / "frames.csv");
  }
  return 0;
}

// --------------------------------------------------------------- ablate

int run_ablate(const Globals& g, const std::string& data, const std::string& out,
               int max_frames) {
  const PipelineConfig base = resolve_config(g);
  const int threads = effective_threads(g);
  const nrt::Dataset train_set = load_dataset_dir(fs::path(data) / "train",
                                                  "run `nrt synth --out " + data + "` first");
  const nrt::Dataset test_set = load_dataset_dir(fs::path(data) / "test",
                                                 "run `nrt synth --out " + data + "` first");

  const nrt::WorldPointCloud cloud = nrt::fuse_dataset(train_set, base, threads);
  const std::vector<nrt::PosedFrameCloud> posed =
      nrt::make_posed_clouds(train_set, base.fuse.normal_k, threads);

  const auto train_with = [&](const PipelineConfig& cfg) {
    return nrt::train_model(cloud, posed, cfg, cfg.tree_strategy(), threads);
  };
  std::printf("training base variant\n");
  const nrt::TrainedModel model_base = train_with(base);
  PipelineConfig no_outlier = base;
  no_outlier.network.outlier_labels = false;
  std::printf("training variant without outlier labels\n");
  const nrt::TrainedModel model_no_outlier = train_with(no_outlier);
  PipelineConfig no_hyper = base;
  no_hyper.network.hypernetwork = false;
  std::printf("training variant without hypernetwork\n");
  const nrt::TrainedModel model_no_hyper = train_with(no_hyper);

  PipelineConfig single_leaf = base;
  single_leaf.route.beam_width = 1;
  PipelineConfig with_icp = base;
  with_icp.ransac.icp = true;

  struct Row {
    const char* name;
    const nrt::TrainedModel* model;
    const PipelineConfig* cfg;
    bool icp;
  };
  const Row rows[] = {
      {"base", &model_base, &base, false},
      {"single-leaf", &model_base, &single_leaf, false},
      {"no-outlier-labels", &model_no_outlier, &base, false},
      {"no-hypernetwork", &model_no_hyper, &base, false},
      {"with-icp", &model_base, &with_icp, true},
  };

  fs::create_directories(out);
  std::string table = "variant             pose-acc  dcre-fine  outlier   score\n";
  for (const Row& row : rows) {
    std::printf("evaluating %s\n", row.name);
    const nrt::BenchmarkRun run =
        nrt::run_benchmark(test_set, std::span(row.model, 1), *row.cfg,
                           row.icp ? &cloud : nullptr, threads, max_frames);
    char line[160];
    std::snprintf(line, sizeof line, "%-19s %8.4f  %9.4f  %7.4f  %6.4f\n", row.name,
                  run.summary.pose_accuracy, run.summary.dcre_fine, run.summary.outlier,
                  run.summary.score);
    table += line;
    nrt::write_summary_kv(run.summary, &run.rejection,
                          fs::path(out) / (std::string(row.name) + ".txt"));
  }
  std::fputs(table.c_str(), stdout);
  std::FILE* f = std::fopen((fs::path(out) / "ablation.txt").string().c_str(), "w");
  if (!f) throw nrt::Error("cannot write " + (fs::path(out) / "ablation.txt").string());
  std::fputs(table.c_str(), f);
  std::fclose(f);
  nrt::save_config(base, fs::path(out) / "effective-config.txt");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural routing tree relocalization pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--profile", g.profile, "config profile: desk or paper")
      ->default_val("desk");
  app.add_option("--config", g.config_file, "config file applied on top of the profile");
  app.add_option("--set", g.sets, "override, e.g. --set tree.levels=5")->take_all();
  app.add_option("--threads", g.threads, "worker threads (0: all cores)");

  std::string data, out, cloud_path, model_dir, trajectory;
  int max_frames = -1;
  std::uint64_t seed = 0;
  int frames = 0;

  CLI::App* synth = app.add_subcommand("synth", "render a synthetic RGB-D dataset");
  synth->add_option("--out", out, "dataset directory")->required();
  CLI::Option* synth_seed = synth->add_option("--seed", seed, "scene seed override");
  CLI::Option* synth_frames =
      synth->add_option("--frames", frames, "train and test frame count override");

  CLI::App* fuse = app.add_subcommand("fuse", "fuse a dataset into a world point cloud");
  fuse->add_option("--data", data, "train dataset directory")->required();
  fuse->add_option("--out", out, "output cloud file (.nrpc)")->required();

  CLI::App* build = app.add_subcommand("build-tree", "build a partition tree from a cloud");
  build->add_option("--cloud", cloud_path, "fused cloud file")->required();
  build->add_option("--out", out, "output tree file (.nrtr)")->required();

  CLI::App* train = app.add_subcommand("train", "train routing networks and leaf mixtures");
  train->add_option("--data", data, "train dataset directory")->required();
  train->add_option("--cloud", cloud_path, "fused cloud (defaults to fusing in-process)");
  train->add_option("--out", out, "model directory")->required();

  CLI::App* localize = app.add_subcommand("localize", "localize a test dataset against a model");
  localize->add_option("--data", data, "test dataset directory")->required();
  localize->add_option("--model", model_dir, "model directory from `nrt train`")->required();
  localize->add_option("--cloud", cloud_path, "fused cloud, required when ransac.icp is on");
  localize->add_option("--out", out, "output directory")->required();
  localize->add_option("--frames", max_frames, "cap on test frames (-1: all)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "score a trajectory against ground truth");
  evaluate->add_option("--data", data, "test dataset directory")->required();
  evaluate->add_option("--trajectory", trajectory, "trajectory file")->required();
  evaluate->add_option("--out", out, "optional output directory");

  CLI::App* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
  ablate->add_option("--data", data, "dataset root containing train/ and test/")->required();
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_option("--frames", max_frames, "cap on test frames (-1: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      if (*synth_seed) g.sets.push_back("scene.seed=" + std::to_string(seed));
      if (*synth_frames) {
        g.sets.push_back("scene.train_frames=" + std::to_string(frames));
        g.sets.push_back("scene.test_frames=" + std::to_string(frames));
      }
      return run_synth(g, out);
    }
    if (fuse->parsed()) return run_fuse(g, data, out);
    if (build->parsed()) return run_build_tree(g, cloud_path, out);
    if (train->parsed()) return run_train(g, data, cloud_path, out);
    if (localize->parsed()) return run_localize(g, data, model_dir, cloud_path, out, max_frames);
    if (evaluate->parsed()) return run_evaluate(g, data, trajectory, out);
    if (ablate->parsed()) return run_ablate(g, data, out, max_frames);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.message.c_str());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
