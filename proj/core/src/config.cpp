#include "nrt/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "nrt/error.hpp"

namespace nrt {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& v) {
  std::size_t pos = 0;
  const int out = std::stoi(v, &pos);
  if (pos != v.size()) throw Error("not an integer: " + v);
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::size_t pos = 0;
  const std::uint64_t out = std::stoull(v, &pos);
  if (pos != v.size()) throw Error("not an unsigned integer: " + v);
  return out;
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw Error("not a number: " + v);
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error("not a boolean: " + v);
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(trim(item)));
  if (out.empty()) throw Error("empty list");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

struct Entry {
  std::string key;  // "section.name"
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

#define NRT_INT(section, name) \
  {#section "." #name, [](const PipelineConfig& c) { return std::to_string(c.section.name); }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = parse_int(v); }}
#define NRT_U64(section, name) \
  {#section "." #name, [](const PipelineConfig& c) { return std::to_string(c.section.name); }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = parse_u64(v); }}
#define NRT_DOUBLE(section, name) \
  {#section "." #name, [](const PipelineConfig& c) { return fmt_double(c.section.name); }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = parse_double(v); }}
#define NRT_BOOL(section, name) \
  {#section "." #name, \
   [](const PipelineConfig& c) { return std::string(c.section.name ? "true" : "false"); }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = parse_bool(v); }}
#define NRT_STRING(section, name) \
  {#section "." #name, [](const PipelineConfig& c) { return c.section.name; }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = v; }}
#define NRT_INT_LIST(section, name) \
  {#section "." #name, [](const PipelineConfig& c) { return fmt_int_list(c.section.name); }, \
   [](PipelineConfig& c, const std::string& v) { c.section.name = parse_int_list(v); }}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      NRT_U64(scene, seed),
      NRT_INT(scene, complexity),
      NRT_INT(scene, train_frames),
      NRT_INT(scene, test_frames),
      NRT_INT(scene, width),
      NRT_INT(scene, height),
      NRT_DOUBLE(scene, fx),
      NRT_DOUBLE(scene, fy),
      NRT_DOUBLE(scene, illumination_min),
      NRT_DOUBLE(scene, illumination_max),
      NRT_DOUBLE(scene, depth_noise),
      NRT_DOUBLE(fuse, voxel),
      NRT_INT(fuse, normal_k),
      NRT_INT(tree, levels),
      NRT_INT(tree, branching),
      NRT_STRING(tree, strategy),
      NRT_INT(tree, min_leaf_points),
      NRT_BOOL(tree, forest),
      NRT_BOOL(network, hypernetwork),
      NRT_BOOL(network, outlier_labels),
      NRT_INT(network, context_n),
      NRT_INT_LIST(network, feat_q),
      NRT_INT_LIST(network, feat_o),
      NRT_INT_LIST(network, classifier),
      NRT_INT_LIST(network, hyper),
      NRT_INT(train, epochs),
      NRT_INT(train, batch),
      NRT_DOUBLE(train, lr),
      NRT_INT(train, lr_halve_every),
      NRT_INT(train, samples_per_level),
      NRT_INT(train, inlier_ratio),
      NRT_DOUBLE(train, holdout),
      NRT_U64(train, seed),
      NRT_INT(route, beam_width),
      NRT_STRING(route, reject_rule),
      NRT_DOUBLE(route, consensus_threshold),
      NRT_DOUBLE(gmm, bandwidth),
      NRT_INT(gmm, max_modes),
      NRT_INT(gmm, min_mode_support),
      NRT_INT(gmm, seed_cap),
      NRT_INT(ransac, hypotheses),
      NRT_INT(ransac, eval_batch),
      NRT_DOUBLE(ransac, rigidity_tol),
      NRT_INT(ransac, max_resample),
      NRT_DOUBLE(ransac, mahal_clamp),
      NRT_DOUBLE(ransac, inlier_mahal),
      NRT_BOOL(ransac, icp),
      NRT_INT(ransac, icp_max_iter),
      NRT_DOUBLE(ransac, icp_convergence),
      NRT_DOUBLE(ransac, icp_pair_radius),
      NRT_INT(ransac, icp_min_pairs),
      NRT_INT(ransac, icp_max_points),
      NRT_INT(localize, query_count),
      NRT_U64(localize, seed),
      NRT_STRING(paths, data),
      NRT_STRING(paths, model),
      NRT_STRING(paths, out),
  };
  return entries;
}

#undef NRT_INT
#undef NRT_U64
#undef NRT_DOUBLE
#undef NRT_BOOL
#undef NRT_STRING
#undef NRT_INT_LIST

}  // namespace

void PipelineConfig::validate() const {
  intrinsics().validate();
  if (scene.complexity < 0) throw Error("config: scene.complexity must be >= 0");
  if (scene.train_frames < 1 || scene.test_frames < 1)
    throw Error("config: frame counts must be positive");
  if (scene.illumination_min > scene.illumination_max || scene.illumination_min <= 0)
    throw Error("config: bad illumination range");
  if (scene.depth_noise < 0) throw Error("config: scene.depth_noise must be >= 0");
  if (fuse.voxel <= 0) throw Error("config: fuse.voxel must be positive");
  if (fuse.normal_k < 3) throw Error("config: fuse.normal_k must be >= 3");
  if (tree.levels < 2) throw Error("config: tree.levels must be >= 2");
  if (tree.branching < 2 || (tree.branching & (tree.branching - 1)) != 0)
    throw Error("config: tree.branching must be a power of two >= 2");
  if (tree.min_leaf_points < 1) throw Error("config: tree.min_leaf_points must be positive");
  box_strategy_from_string(tree.strategy);
  if (network.context_n < 1) throw Error("config: network.context_n must be positive");
  if (network.feat_q.empty() || network.feat_o.empty() || network.classifier.empty() ||
      network.hyper.empty())
    throw Error("config: network layer lists must be non-empty");
  for (const auto* widths : {&network.feat_q, &network.feat_o, &network.classifier,
                             &network.hyper})
    for (int w : *widths)
      if (w < 1) throw Error("config: network widths must be positive");
  if (train.epochs < 1 || train.batch < 1 || train.lr <= 0 || train.lr_halve_every < 1)
    throw Error("config: bad training hyperparameters");
  if (train.samples_per_level < 10) throw Error("config: train.samples_per_level too small");
  if (train.inlier_ratio < 1) throw Error("config: train.inlier_ratio must be >= 1");
  if (train.holdout <= 0 || train.holdout >= 0.5)
    throw Error("config: train.holdout must be in (0, 0.5)");
  if (route.beam_width < 1) throw Error("config: route.beam_width must be positive");
  reject_rule_from_string(route.reject_rule);
  if (route.consensus_threshold <= 0 || route.consensus_threshold > 1)
    throw Error("config: route.consensus_threshold must be in (0, 1]");
  if (gmm.bandwidth <= 0 || gmm.max_modes < 1 || gmm.min_mode_support < 1 || gmm.seed_cap < 1)
    throw Error("config: bad gmm settings");
  ransac_config(1).validate();
  if (localize.query_count < 3) throw Error("config: localize.query_count must be >= 3");
}

CameraIntrinsics PipelineConfig::intrinsics() const {
  CameraIntrinsics intr;
  intr.fx = scene.fx;
  intr.fy = scene.fy;
  intr.cx = scene.width / 2.0;
  intr.cy = scene.height / 2.0;
  intr.width = scene.width;
  intr.height = scene.height;
  return intr;
}

BoxStrategy PipelineConfig::tree_strategy() const {
  return box_strategy_from_string(tree.strategy);
}

NetShape PipelineConfig::net_shape() const {
  NetShape shape;
  shape.feat_q = network.feat_q;
  shape.feat_o = network.feat_o;
  shape.classifier_hidden = network.classifier;
  shape.hyper_hidden = network.hyper;
  return shape;
}

TrainConfig PipelineConfig::train_config() const {
  TrainConfig cfg;
  cfg.epochs = train.epochs;
  cfg.batch = train.batch;
  cfg.lr = train.lr;
  cfg.lr_halve_every = train.lr_halve_every;
  cfg.seed = train.seed;
  return cfg;
}

RouteConfig PipelineConfig::route_config(int threads) const {
  RouteConfig cfg;
  cfg.beam_width = route.beam_width;
  cfg.reject_rule = reject_rule_from_string(route.reject_rule);
  cfg.consensus_threshold = route.consensus_threshold;
  cfg.threads = threads;
  return cfg;
}

GmmConfig PipelineConfig::gmm_config() const {
  GmmConfig cfg;
  cfg.bandwidth = gmm.bandwidth;
  cfg.max_modes = gmm.max_modes;
  cfg.min_mode_support = gmm.min_mode_support;
  cfg.seed_cap = gmm.seed_cap;
  return cfg;
}

RansacConfig PipelineConfig::ransac_config(int threads) const {
  RansacConfig cfg;
  cfg.hypothesis_count = ransac.hypotheses;
  cfg.eval_batch = ransac.eval_batch;
  cfg.rigidity_tol = ransac.rigidity_tol;
  cfg.max_resample = ransac.max_resample;
  cfg.mahal_clamp = ransac.mahal_clamp;
  cfg.inlier_mahal = ransac.inlier_mahal;
  cfg.icp = ransac.icp;
  cfg.icp_max_iter = ransac.icp_max_iter;
  cfg.icp_convergence = ransac.icp_convergence;
  cfg.icp_pair_radius = ransac.icp_pair_radius;
  cfg.icp_min_pairs = ransac.icp_min_pairs;
  cfg.icp_max_points = ransac.icp_max_points;
  cfg.threads = threads;
  return cfg;
}

PipelineConfig config_profile(const std::string& name) {
  if (name == "desk") return PipelineConfig{};
  if (name == "paper") {
    PipelineConfig cfg;
    cfg.scene.width = 640;
    cfg.scene.height = 480;
    cfg.scene.fx = cfg.scene.fy = 525;
    cfg.scene.train_frames = 1000;
    cfg.scene.test_frames = 1000;
    cfg.fuse.voxel = 0.01;
    cfg.tree.levels = 5;
    cfg.tree.branching = 16;
    cfg.network.context_n = 600;
    cfg.network.feat_q = {64, 128, 32};
    cfg.network.feat_o = {64, 128, 512};
    cfg.network.classifier = {2048, 1024};
    cfg.network.hyper = {64, 64};
    cfg.train.epochs = 60;
    cfg.train.batch = 256;
    cfg.train.lr_halve_every = 20;
    cfg.train.samples_per_level = 200000;
    cfg.gmm.bandwidth = 0.1;
    cfg.gmm.seed_cap = 500;
    cfg.ransac.icp = true;
    cfg.localize.query_count = 1024;
    return cfg;
  }
  throw Error("unknown config profile: " + name);
}

void config_set(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  for (const Entry& e : registry()) {
    if (e.key == key) {
      try {
        e.set(cfg, value);
      } catch (const std::exception& ex) {
        throw Error("config: bad value for " + key + ": " + ex.what());
      }
      return;
    }
  }
  throw Error("config: unknown key: " + key);
}

std::string config_to_string(const PipelineConfig& cfg) {
  std::string out;
  std::string section;
  for (const Entry& e : registry()) {
    const auto dot = e.key.find('.');
    const std::string sec = e.key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += e.key.substr(dot + 1) + "=" + e.get(cfg) + "\n";
  }
  return out;
}

void save_config(const PipelineConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("save_config: cannot open " + path.string());
  os << config_to_string(cfg);
  if (!os) throw Error("save_config: write failed for " + path.string());
}

PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base) {
  std::ifstream is(path);
  if (!is) throw Error("load_config: cannot open " + path.string());
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw Error("load_config: malformed section at line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("load_config: expected key=value at line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty())
      throw Error("load_config: key before any [section] at line " + std::to_string(lineno));
    config_set(base, section + "." + key, value);
  }
  return base;
}

}  // namespace nrt
