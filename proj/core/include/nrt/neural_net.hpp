#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nrt/error.hpp"
#include "nrt/partition_tree.hpp"
#include "nrt/routing_features.hpp"

namespace nrt {

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecX = Eigen::Vector<T, Eigen::Dynamic>;

// Network widths. Defaults follow the reference architecture: query branch
// 3-64-128-32, context branch 7-64-128-512 with max-pool, classifier
// 544-2048-1024-(k+1); the desk profile shrinks these for CPU training.
struct NetShape {
  std::vector<int> feat_q{64, 128, 32};
  std::vector<int> feat_o{64, 128, 512};
  std::vector<int> classifier_hidden{2048, 1024};
  std::vector<int> hyper_hidden{64, 64};
};

struct TrainConfig {
  int epochs = 60;
  int batch = 256;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int lr_halve_every = 20;
  std::uint64_t seed = 0;
};

inline double learning_rate_at(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int i = 0; i < epoch / cfg.lr_halve_every; ++i) lr *= 0.5;
  return lr;
}

struct TrainLog {
  std::vector<double> loss;      // per epoch, mean over batches
  std::vector<double> accuracy;  // per epoch, fraction of correct argmax
};

// Mutable view over one parameter tensor and its gradient, for optimizer
// steps and finite-difference checks.
template <class T>
struct ParamView {
  std::string name;
  T* value;
  T* grad;
  std::size_t size;
};

namespace nn {

template <class T>
struct Dense {
  MatX<T> w;  // out x in
  VecX<T> b;
  MatX<T> gw;
  VecX<T> gb;
  MatX<T> mw, vw;
  VecX<T> mb, vb;

  void init(int in, int out, std::mt19937_64& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    w.resize(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = static_cast<T>(dist(rng));
    b = VecX<T>::Zero(out);
    reset_state();
  }

  void reset_state() {
    gw = MatX<T>::Zero(w.rows(), w.cols());
    gb = VecX<T>::Zero(b.size());
    mw = gw;
    vw = gw;
    mb = gb;
    vb = gb;
  }

  MatX<T> forward(const MatX<T>& x) const {
    return (x * w.transpose()).rowwise() + b.transpose();
  }

  // Accumulates parameter gradients and returns the input gradient.
  MatX<T> backward(const MatX<T>& x, const MatX<T>& dy) {
    gw.noalias() += dy.transpose() * x;
    gb.noalias() += dy.colwise().sum().transpose();
    return dy * w;
  }
};

template <class T>
MatX<T> relu(const MatX<T>& x) {
  return x.cwiseMax(T(0));
}

// y is the relu output; the subgradient at 0 is taken as 0.
template <class T>
MatX<T> relu_backward(const MatX<T>& y, const MatX<T>& dy) {
  return (y.array() > T(0)).template cast<T>() * dy.array();
}

// Plain MLP with ReLU after every layer except optionally the last.
template <class T>
struct Mlp {
  std::vector<Dense<T>> layers;
  bool relu_last = true;

  void init(int in, std::span<const int> widths, bool relu_after_last, std::mt19937_64& rng) {
    relu_last = relu_after_last;
    layers.resize(widths.size());
    for (std::size_t i = 0; i < widths.size(); ++i) {
      layers[i].init(in, widths[i], rng);
      in = widths[i];
    }
  }

  struct Cache {
    std::vector<MatX<T>> x;  // input to each dense layer
    MatX<T> y;               // final output (after activation policy)
  };

  MatX<T> forward(const MatX<T>& input, Cache* cache = nullptr) const {
    MatX<T> x = input;
    if (cache) cache->x.clear();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (cache) cache->x.push_back(x);
      x = layers[i].forward(x);
      if (relu_last || i + 1 < layers.size()) x = relu(x);
    }
    if (cache) cache->y = x;
    return x;
  }

  MatX<T> backward(const Cache& cache, const MatX<T>& dout) {
    MatX<T> dy = dout;
    for (std::size_t i = layers.size(); i-- > 0;) {
      if (relu_last || i + 1 < layers.size()) {
        // Recompute the post-relu output of layer i: it equals the input of
        // layer i+1, or the cached final output for the last layer.
        const MatX<T>& post = (i + 1 < layers.size()) ? cache.x[i + 1] : cache.y;
        dy = relu_backward(post, dy);
      }
      dy = layers[i].backward(cache.x[i], dy);
    }
    return dy;
  }
};

// Max over groups of n consecutive rows, per column. Ties keep the first row.
template <class T>
struct MaxPool {
  struct Cache {
    Eigen::MatrixXi argrow;  // groups x channels, absolute row index
    Eigen::Index in_rows = 0;
  };

  static MatX<T> forward(const MatX<T>& x, int n, Cache* cache = nullptr) {
    if (n < 1 || x.rows() % n != 0) throw Error("max-pool: rows not divisible by group size");
    const Eigen::Index groups = x.rows() / n;
    MatX<T> y(groups, x.cols());
    Eigen::MatrixXi arg(groups, x.cols());
    for (Eigen::Index g = 0; g < groups; ++g) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        T best = x(g * n, c);
        Eigen::Index best_row = g * n;
        for (Eigen::Index r = g * n + 1; r < (g + 1) * n; ++r) {
          if (x(r, c) > best) {
            best = x(r, c);
            best_row = r;
          }
        }
        y(g, c) = best;
        arg(g, c) = static_cast<int>(best_row);
      }
    }
    if (cache) {
      cache->argrow = std::move(arg);
      cache->in_rows = x.rows();
    }
    return y;
  }

  static MatX<T> backward(const Cache& cache, const MatX<T>& dy) {
    MatX<T> dx = MatX<T>::Zero(cache.in_rows, dy.cols());
    for (Eigen::Index g = 0; g < dy.rows(); ++g)
      for (Eigen::Index c = 0; c < dy.cols(); ++c) dx(cache.argrow(g, c), c) += dy(g, c);
    return dx;
  }
};

// Per-sample feature standardization followed by an externally supplied
// affine (scale/shift rows). The affine gradient is returned to the caller,
// which owns those parameters (hypernetwork output or learned vectors).
template <class T>
struct LayerNorm {
  static constexpr T kEps = static_cast<T>(1e-5);

  struct Cache {
    MatX<T> xhat;
    VecX<T> inv_sigma;  // per row
  };

  static MatX<T> forward(const MatX<T>& x, const MatX<T>& gamma, const MatX<T>& beta,
                         Cache* cache = nullptr) {
    const VecX<T> mean = x.rowwise().mean();
    MatX<T> centered = x.colwise() - mean;
    const VecX<T> var = centered.array().square().rowwise().mean();
    const VecX<T> inv_sigma = (var.array() + kEps).rsqrt();
    MatX<T> xhat = centered.array().colwise() * inv_sigma.array();
    MatX<T> y = (gamma.array() * xhat.array() + beta.array()).matrix();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_sigma = inv_sigma;
    }
    return y;
  }

  struct Grads {
    MatX<T> dx;
    MatX<T> dgamma;
    MatX<T> dbeta;
  };

  static Grads backward(const Cache& cache, const MatX<T>& gamma, const MatX<T>& dy) {
    Grads g;
    g.dgamma = (dy.array() * cache.xhat.array()).matrix();
    g.dbeta = dy;
    const MatX<T> dxhat = (dy.array() * gamma.array()).matrix();
    const VecX<T> mean_dxhat = dxhat.rowwise().mean();
    const VecX<T> mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().mean();
    g.dx = ((dxhat.colwise() - mean_dxhat).array() -
            (cache.xhat.array().colwise() * mean_dxhat_xhat.array()))
               .colwise() *
           cache.inv_sigma.array();
    return g;
  }
};

// Masked softmax cross-entropy. Inactive classes get probability exactly 0
// and no gradient. Loss is the mean over rows.
template <class T>
struct SoftmaxCE {
  static MatX<T> probabilities(const MatX<T>& logits, const MatX<std::uint8_t>& mask) {
    MatX<T> p = MatX<T>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      T maxv = std::numeric_limits<T>::lowest();
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        if (mask(r, c) && logits(r, c) > maxv) maxv = logits(r, c);
      if (maxv == std::numeric_limits<T>::lowest())
        throw Error("softmax: row with no active class");
      T sum = 0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        if (!mask(r, c)) continue;
        p(r, c) = std::exp(logits(r, c) - maxv);
        sum += p(r, c);
      }
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        if (mask(r, c)) p(r, c) /= sum;
    }
    return p;
  }

  // Returns (mean loss, dlogits).
  static std::pair<double, MatX<T>> loss_and_grad(const MatX<T>& logits,
                                                  const MatX<std::uint8_t>& mask,
                                                  std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
      throw Error("softmax: label count mismatch");
    MatX<T> p = probabilities(logits, mask);
    double loss = 0;
    const T inv_b = static_cast<T>(1.0 / static_cast<double>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const int y = labels[r];
      if (y < 0 || y >= logits.cols() || !mask(r, y))
        throw Error("softmax: label inactive at this node");
      loss -= std::log(std::max(static_cast<double>(p(r, y)), 1e-300));
      p(r, y) -= T(1);
    }
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c)
        if (!mask(r, c)) p(r, c) = T(0);
    p *= inv_b;
    return {loss / static_cast<double>(logits.rows()), std::move(p)};
  }
};

template <class T>
struct Adam {
  double beta1, beta2, eps;
  long step = 0;

  // One update over a parameter/gradient/moment tuple.
  void update(T* value, const T* grad, T* m, T* v, std::size_t n, double lr) const {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(grad[i]);
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      value[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
};

}  // namespace nn

template <class T>
struct ForwardCache;

// One routing function: shared across all split nodes of a tree level, with
// per-node normalization affines produced by a hypernetwork over the node's
// one-hot identity. The ablation variant owns learned affine vectors instead
// of a hypernetwork (used for independent per-node networks).
template <class T>
class LevelRouter {
 public:
  LevelRouter() = default;

  // node_ids fixes the one-hot order (ascending tree ids by convention).
  LevelRouter(const PartitionTree& tree, std::vector<int> node_ids, NetShape shape, int context_n,
              bool use_hyper, bool outlier_slot, std::uint64_t init_seed);

  static LevelRouter for_level(const PartitionTree& tree, int level, NetShape shape,
                               int context_n, bool use_hyper, bool outlier_slot,
                               std::uint64_t init_seed);

  int level() const { return level_; }
  int branching() const { return branching_; }
  int klass_count() const { return branching_ + (outlier_slot_ ? 1 : 0); }
  int outlier_class() const { return outlier_slot_ ? branching_ : -1; }
  bool has_outlier_slot() const { return outlier_slot_; }
  bool uses_hypernet() const { return use_hyper_; }
  int context_n() const { return context_n_; }
  const std::vector<int>& node_order() const { return node_order_; }
  int node_index(int node_id) const;

  // Batched masked class probabilities; samples[i] is evaluated under
  // node_ids[i]'s mask and affine.
  MatX<T> forward(std::span<const RoutingSample> samples, std::span<const int> node_ids) const;

  // Mean loss over the batch; fills parameter gradients (after zeroing).
  double loss_and_grad(std::span<const LabeledSample> batch);
  double loss_only(std::span<const LabeledSample> batch) const;

  TrainLog train(std::span<const LabeledSample> samples, const TrainConfig& cfg);

  // (mean loss, accuracy) without touching gradients.
  std::pair<double, double> evaluate(std::span<const LabeledSample> samples,
                                     int eval_batch = 512) const;

  int label_to_class(int label) const;
  std::vector<ParamView<T>> parameters();
  std::int64_t parameter_count() const;

  void serialize(std::ostream& os) const;
  static LevelRouter deserialize(std::istream& is);

 private:
  struct Batch {
    MatX<T> xq;                  // B x 3
    MatX<T> xo;                  // (B*N) x 7
    MatX<T> onehot;              // B x n_nodes
    MatX<std::uint8_t> mask;     // B x K
    std::vector<int> classes;    // labels as class indices (training only)
  };
  Batch assemble(std::span<const RoutingSample> samples, std::span<const int> node_ids,
                 std::span<const int> labels) const;
  MatX<T> forward_impl(const Batch& batch, ForwardCache<T>* cache) const;
  void zero_grad();
  void adam_step(double lr);
  void build_masks(const PartitionTree& tree);

  int level_ = 0;
  int branching_ = 0;
  int context_n_ = 0;
  bool outlier_slot_ = false;
  bool use_hyper_ = true;
  NetShape shape_;
  std::vector<int> node_order_;
  std::unordered_map<int, int> node_index_;
  MatX<std::uint8_t> node_mask_;  // n_nodes x K

  nn::Mlp<T> feat_q_;
  nn::Mlp<T> feat_o_;
  std::vector<nn::Dense<T>> cls_;
  nn::Mlp<T> hyper_;
  // Learned affine (one pair of vectors per classifier hidden layer) when the
  // hypernetwork is disabled, with matching optimizer state.
  std::vector<VecX<T>> gamma_, beta_;
  std::vector<VecX<T>> ggamma_, gbeta_, mgamma_, vgamma_, mbeta_, vbeta_;
  nn::Adam<T> adam_{0.9, 0.999, 1e-8};
  int last_correct_ = 0;  // argmax hits in the latest loss_and_grad batch
};

// Independently trained single-node network with learned normalization
// affines (the hypernetwork ablation baseline).
template <class T>
LevelRouter<T> train_per_node(const PartitionTree& tree, int node_id,
                              std::span<const LabeledSample> samples, const NetShape& shape,
                              int context_n, const TrainConfig& cfg, TrainLog* log = nullptr);

void save_router(const LevelRouter<float>& router, const std::filesystem::path& path);
LevelRouter<float> load_router(const std::filesystem::path& path);

extern template class LevelRouter<float>;
extern template class LevelRouter<double>;
extern template LevelRouter<float> train_per_node<float>(const PartitionTree&, int,
                                                         std::span<const LabeledSample>,
                                                         const NetShape&, int, const TrainConfig&,
                                                         TrainLog*);
extern template LevelRouter<double> train_per_node<double>(const PartitionTree&, int,
                                                           std::span<const LabeledSample>,
                                                           const NetShape&, int,
                                                           const TrainConfig&, TrainLog*);

}  // namespace nrt
