#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nrt/leaf_gmm.hpp"
#include "nrt/neural_net.hpp"
#include "nrt/pose_estimation.hpp"
#include "nrt/routing_inference.hpp"
#include "nrt/scene_model.hpp"

namespace nrt {

// Every pipeline tunable, grouped by stage. Serialized as flat key=value
// lines under [section] headers; unknown keys are rejected on load.
struct PipelineConfig {
  struct Scene {
    std::uint64_t seed = 7;
    int complexity = 12;
    int train_frames = 200;
    int test_frames = 100;
    int width = 160, height = 120;
    double fx = 100, fy = 100;
    double illumination_min = 1.0, illumination_max = 1.0;  // test-frame range
    double depth_noise = 0.0;
  } scene;

  struct Fuse {
    double voxel = 0.015;
    int normal_k = 17;
  } fuse;

  struct Tree {
    int levels = 4;     // t
    int branching = 8;  // m, power of two
    std::string strategy = "original";
    int min_leaf_points = 20;
    bool forest = false;  // union of the four box strategies
  } tree;

  struct Network {
    bool hypernetwork = true;
    bool outlier_labels = true;
    int context_n = 128;
    std::vector<int> feat_q{16, 32, 16};
    std::vector<int> feat_o{16, 32, 64};
    std::vector<int> classifier{128, 64};
    std::vector<int> hyper{32, 32};
  } network;

  struct Train {
    int epochs = 15;
    int batch = 256;
    double lr = 1e-3;
    int lr_halve_every = 20;
    int samples_per_level = 12000;
    int inlier_ratio = 3;
    double holdout = 0.1;
    std::uint64_t seed = 1;
  } train;

  struct Route {
    int beam_width = 4;
    std::string reject_rule = "greedy";
    double consensus_threshold = 0.5;
  } route;

  struct Gmm {
    double bandwidth = 0.08;
    int max_modes = 10;
    int min_mode_support = 10;
    int seed_cap = 64;
  } gmm;

  struct Ransac {
    int hypotheses = 1024;
    int eval_batch = 500;
    double rigidity_tol = 0.1;
    int max_resample = 50;
    double mahal_clamp = 10.0;
    double inlier_mahal = 3.0;
    bool icp = false;
    int icp_max_iter = 20;
    double icp_convergence = 1e-5;
    double icp_pair_radius = 0.1;
    int icp_min_pairs = 100;
    int icp_max_points = 2000;
  } ransac;

  struct Localize {
    int query_count = 256;
    std::uint64_t seed = 3;
  } localize;

  struct Paths {
    std::string data;
    std::string model;
    std::string out;
  } paths;

  void validate() const;

  CameraIntrinsics intrinsics() const;
  BoxStrategy tree_strategy() const;
  NetShape net_shape() const;
  TrainConfig train_config() const;
  RouteConfig route_config(int threads) const;
  GmmConfig gmm_config() const;
  RansacConfig ransac_config(int threads) const;
};

// Built-in profiles: "desk" (CPU-sized default) and "paper" (full-scale
// reference settings; impractical without the real datasets).
PipelineConfig config_profile(const std::string& name);

// key must be "section.key"; value parsed per field type.
void config_set(PipelineConfig& cfg, const std::string& key, const std::string& value);

std::string config_to_string(const PipelineConfig& cfg);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);
// Applies the file on top of base; rejects unknown keys and malformed lines.
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base);

}  // namespace nrt
