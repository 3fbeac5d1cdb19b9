#include "nrt/neural_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nrt/binary_io.hpp"
#include "nrt/rng.hpp"

namespace nrt {

namespace {

constexpr char kWeightsMagic[4] = {'N', 'R', 'W', 'T'};
constexpr std::uint32_t kWeightsVersion = 1;

template <class T>
void write_tensor(std::ostream& os, const MatX<T>& m) {
  io::write_scalar<std::uint32_t>(os, 2);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      io::write_scalar<float>(os, static_cast<float>(m(r, c)));
}

template <class T>
void write_tensor(std::ostream& os, const VecX<T>& v) {
  io::write_scalar<std::uint32_t>(os, 1);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) io::write_scalar<float>(os, static_cast<float>(v[i]));
}

template <class T>
void read_tensor(std::istream& is, MatX<T>& m) {
  if (io::read_scalar<std::uint32_t>(is, "tensor rank") != 2)
    throw Error("weights file: expected rank-2 tensor");
  const auto rows = io::read_scalar<std::uint32_t>(is, "tensor rows");
  const auto cols = io::read_scalar<std::uint32_t>(is, "tensor cols");
  m.resize(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c)
      m(r, c) = static_cast<T>(io::read_scalar<float>(is, "tensor value"));
}

template <class T>
void read_tensor(std::istream& is, VecX<T>& v) {
  if (io::read_scalar<std::uint32_t>(is, "tensor rank") != 1)
    throw Error("weights file: expected rank-1 tensor");
  const auto n = io::read_scalar<std::uint32_t>(is, "tensor size");
  v.resize(n);
  for (std::uint32_t i = 0; i < n; ++i)
    v[i] = static_cast<T>(io::read_scalar<float>(is, "tensor value"));
}

void write_widths(std::ostream& os, const std::vector<int>& widths) {
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(widths.size()));
  for (int w : widths) io::write_scalar<std::int32_t>(os, w);
}

std::vector<int> read_widths(std::istream& is) {
  const auto n = io::read_scalar<std::uint32_t>(is, "width count");
  std::vector<int> widths(n);
  for (auto& w : widths) w = io::read_scalar<std::int32_t>(is, "width");
  return widths;
}

}  // namespace

template <class T>
struct ForwardCache {
  typename nn::Mlp<T>::Cache q, o, hyper;
  typename nn::MaxPool<T>::Cache pool;
  std::vector<MatX<T>> cls_x;  // input to each classifier dense
  std::vector<typename nn::LayerNorm<T>::Cache> norm;
  std::vector<MatX<T>> norm_gamma;
  std::vector<MatX<T>> post;  // post-relu output per hidden layer
  MatX<T> h;
  MatX<T> logits;
};

template <class T>
LevelRouter<T>::LevelRouter(const PartitionTree& tree, std::vector<int> node_ids, NetShape shape,
                            int context_n, bool use_hyper, bool outlier_slot,
                            std::uint64_t init_seed)
    : branching_(tree.branching()),
      context_n_(context_n),
      outlier_slot_(outlier_slot),
      use_hyper_(use_hyper),
      shape_(std::move(shape)),
      node_order_(std::move(node_ids)) {
  if (node_order_.empty()) throw Error("LevelRouter: no nodes to route");
  if (context_n_ < 1) throw Error("LevelRouter: context count must be positive");
  level_ = tree.node(node_order_.front()).level;
  for (int id : node_order_) {
    const TreeNode& n = tree.node(id);
    if (n.is_leaf()) throw Error("LevelRouter: leaves carry no routing function");
    if (n.level != level_) throw Error("LevelRouter: nodes span multiple levels");
  }
  for (std::size_t i = 0; i < node_order_.size(); ++i)
    node_index_[node_order_[i]] = static_cast<int>(i);
  build_masks(tree);

  auto rng = make_rng(init_seed, static_cast<std::uint64_t>(level_), 0x696e6974ull);
  feat_q_.init(3, shape_.feat_q, true, rng);
  feat_o_.init(kContextDim, shape_.feat_o, true, rng);

  const int feat_dim = shape_.feat_q.back() + shape_.feat_o.back();
  cls_.resize(shape_.classifier_hidden.size() + 1);
  int in = feat_dim;
  for (std::size_t i = 0; i < shape_.classifier_hidden.size(); ++i) {
    cls_[i].init(in, shape_.classifier_hidden[i], rng);
    in = shape_.classifier_hidden[i];
  }
  cls_.back().init(in, klass_count(), rng);

  int affine_channels = 0;
  for (int c : shape_.classifier_hidden) affine_channels += c;
  if (use_hyper_) {
    std::vector<int> widths = shape_.hyper_hidden;
    widths.push_back(2 * affine_channels);
    hyper_.init(static_cast<int>(node_order_.size()), widths, false, rng);
    // Identity normalization at the start: scale 1, shift 0 regardless of
    // the node identity. The output is laid out per layer as
    // [gamma_l, beta_l] pairs, matching the forward slicing.
    nn::Dense<T>& last = hyper_.layers.back();
    last.w.setZero();
    int off = 0;
    for (int c : shape_.classifier_hidden) {
      for (int i = 0; i < c; ++i) last.b[off + i] = T(1);
      off += 2 * c;
    }
  } else {
    gamma_.clear();
    beta_.clear();
    for (int c : shape_.classifier_hidden) {
      gamma_.push_back(VecX<T>::Ones(c));
      beta_.push_back(VecX<T>::Zero(c));
    }
    auto zeros_like = [](const std::vector<VecX<T>>& src) {
      std::vector<VecX<T>> out;
      for (const auto& v : src) out.push_back(VecX<T>::Zero(v.size()));
      return out;
    };
    ggamma_ = zeros_like(gamma_);
    gbeta_ = zeros_like(beta_);
    mgamma_ = zeros_like(gamma_);
    vgamma_ = zeros_like(gamma_);
    mbeta_ = zeros_like(beta_);
    vbeta_ = zeros_like(beta_);
  }
}

template <class T>
LevelRouter<T> LevelRouter<T>::for_level(const PartitionTree& tree, int level, NetShape shape,
                                         int context_n, bool use_hyper, bool outlier_slot,
                                         std::uint64_t init_seed) {
  std::vector<int> ids;
  for (int id : tree.nodes_at_level(level))
    if (!tree.node(id).is_leaf()) ids.push_back(id);
  if (ids.empty()) throw Error("LevelRouter: level has no split nodes");
  return LevelRouter(tree, std::move(ids), std::move(shape), context_n, use_hyper, outlier_slot,
                     init_seed);
}

template <class T>
void LevelRouter<T>::build_masks(const PartitionTree& tree) {
  node_mask_ = MatX<std::uint8_t>::Zero(node_order_.size(), klass_count());
  for (std::size_t i = 0; i < node_order_.size(); ++i) {
    const TreeNode& n = tree.node(node_order_[i]);
    for (int slot = 0; slot < branching_; ++slot)
      if (n.children[slot] != kEmptyChild) node_mask_(i, slot) = 1;
    if (outlier_slot_) node_mask_(i, branching_) = 1;
  }
}

template <class T>
int LevelRouter<T>::node_index(int node_id) const {
  const auto it = node_index_.find(node_id);
  if (it == node_index_.end()) throw Error("LevelRouter: node not at this level");
  return it->second;
}

template <class T>
int LevelRouter<T>::label_to_class(int label) const {
  if (label == kOutlierLabel) {
    if (!outlier_slot_) throw Error("LevelRouter: outlier label at a level without outlier class");
    return branching_;
  }
  if (label < 0 || label >= branching_) throw Error("LevelRouter: label out of range");
  return label;
}

template <class T>
typename LevelRouter<T>::Batch LevelRouter<T>::assemble(std::span<const RoutingSample> samples,
                                                        std::span<const int> node_ids,
                                                        std::span<const int> labels) const {
  if (samples.size() != node_ids.size()) throw Error("LevelRouter: sample/node count mismatch");
  const Eigen::Index b = static_cast<Eigen::Index>(samples.size());
  Batch batch;
  batch.xq.resize(b, 3);
  batch.xo.resize(b * context_n_, kContextDim);
  batch.onehot = MatX<T>::Zero(b, static_cast<Eigen::Index>(node_order_.size()));
  batch.mask.resize(b, klass_count());
  for (Eigen::Index i = 0; i < b; ++i) {
    const RoutingSample& s = samples[i];
    if (s.context_count() != context_n_) throw Error("LevelRouter: sample context size mismatch");
    for (int j = 0; j < 3; ++j) batch.xq(i, j) = static_cast<T>(s.query_color[j]);
    for (int r = 0; r < context_n_; ++r)
      for (int c = 0; c < kContextDim; ++c)
        batch.xo(i * context_n_ + r, c) = static_cast<T>(s.context[r * kContextDim + c]);
    const int idx = node_index(node_ids[i]);
    batch.onehot(i, idx) = T(1);
    batch.mask.row(i) = node_mask_.row(idx);
  }
  if (!labels.empty()) {
    if (labels.size() != samples.size()) throw Error("LevelRouter: label count mismatch");
    batch.classes.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) batch.classes[i] = label_to_class(labels[i]);
  }
  return batch;
}

template <class T>
MatX<T> LevelRouter<T>::forward_impl(const Batch& batch, ForwardCache<T>* cache) const {
  ForwardCache<T> local;
  ForwardCache<T>& cc = cache ? *cache : local;
  const bool caching = cache != nullptr;

  const MatX<T> hq = feat_q_.forward(batch.xq, caching ? &cc.q : nullptr);
  const MatX<T> of = feat_o_.forward(batch.xo, caching ? &cc.o : nullptr);
  const MatX<T> ho = nn::MaxPool<T>::forward(of, context_n_, caching ? &cc.pool : nullptr);

  MatX<T> h(hq.rows(), hq.cols() + ho.cols());
  h << hq, ho;
  if (caching) cc.h = h;

  MatX<T> hyper_out;
  if (use_hyper_) hyper_out = hyper_.forward(batch.onehot, caching ? &cc.hyper : nullptr);

  MatX<T> x = std::move(h);
  int offset = 0;
  for (std::size_t l = 0; l < shape_.classifier_hidden.size(); ++l) {
    const int c = shape_.classifier_hidden[l];
    if (caching) cc.cls_x.push_back(x);
    MatX<T> z = cls_[l].forward(x);
    MatX<T> gamma, beta;
    if (use_hyper_) {
      gamma = hyper_out.middleCols(offset, c);
      beta = hyper_out.middleCols(offset + c, c);
    } else {
      gamma = gamma_[l].transpose().replicate(z.rows(), 1);
      beta = beta_[l].transpose().replicate(z.rows(), 1);
    }
    offset += 2 * c;
    typename nn::LayerNorm<T>::Cache norm_cache;
    MatX<T> normed =
        nn::LayerNorm<T>::forward(z, gamma, beta, caching ? &norm_cache : nullptr);
    x = nn::relu(normed);
    if (caching) {
      cc.norm.push_back(std::move(norm_cache));
      cc.norm_gamma.push_back(std::move(gamma));
      cc.post.push_back(x);
    }
  }
  if (caching) cc.cls_x.push_back(x);
  MatX<T> logits = cls_.back().forward(x);
  if (caching) cc.logits = logits;
  return logits;
}

template <class T>
MatX<T> LevelRouter<T>::forward(std::span<const RoutingSample> samples,
                                std::span<const int> node_ids) const {
  const Batch batch = assemble(samples, node_ids, {});
  const MatX<T> logits = forward_impl(batch, nullptr);
  return nn::SoftmaxCE<T>::probabilities(logits, batch.mask);
}

template <class T>
void LevelRouter<T>::zero_grad() {
  auto clear = [](nn::Dense<T>& d) {
    d.gw.setZero();
    d.gb.setZero();
  };
  for (auto& l : feat_q_.layers) clear(l);
  for (auto& l : feat_o_.layers) clear(l);
  for (auto& l : cls_) clear(l);
  for (auto& l : hyper_.layers) clear(l);
  for (auto& g : ggamma_) g.setZero();
  for (auto& g : gbeta_) g.setZero();
}

template <class T>
double LevelRouter<T>::loss_and_grad(std::span<const LabeledSample> batch_samples) {
  if (batch_samples.empty()) throw Error("LevelRouter: empty batch");
  std::vector<RoutingSample> samples(batch_samples.size());
  std::vector<int> node_ids(batch_samples.size());
  std::vector<int> labels(batch_samples.size());
  for (std::size_t i = 0; i < batch_samples.size(); ++i) {
    samples[i] = batch_samples[i].sample;
    node_ids[i] = batch_samples[i].node_id;
    labels[i] = batch_samples[i].label;
  }

  zero_grad();
  const Batch batch = assemble(samples, node_ids, labels);
  ForwardCache<T> cache;
  forward_impl(batch, &cache);
  auto [loss, dlogits] = nn::SoftmaxCE<T>::loss_and_grad(cache.logits, batch.mask, batch.classes);

  // Track batch accuracy for the epoch log.
  {
    const MatX<T> probs = nn::SoftmaxCE<T>::probabilities(cache.logits, batch.mask);
    int correct = 0;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      Eigen::Index arg = 0;
      probs.row(r).maxCoeff(&arg);
      if (static_cast<int>(arg) == batch.classes[r]) ++correct;
    }
    last_correct_ = correct;
  }

  MatX<T> dy = cls_.back().backward(cache.cls_x.back(), dlogits);
  const std::size_t hidden = shape_.classifier_hidden.size();
  MatX<T> dhyper;
  if (use_hyper_) {
    int channels = 0;
    for (int c : shape_.classifier_hidden) channels += c;
    dhyper = MatX<T>::Zero(dy.rows(), 2 * channels);
  }
  int offset = 0;
  for (int c : shape_.classifier_hidden) offset += 2 * c;
  for (std::size_t l = hidden; l-- > 0;) {
    const int c = shape_.classifier_hidden[l];
    offset -= 2 * c;
    dy = nn::relu_backward(cache.post[l], dy);
    auto grads = nn::LayerNorm<T>::backward(cache.norm[l], cache.norm_gamma[l], dy);
    if (use_hyper_) {
      dhyper.middleCols(offset, c) = grads.dgamma;
      dhyper.middleCols(offset + c, c) = grads.dbeta;
    } else {
      ggamma_[l] += grads.dgamma.colwise().sum().transpose();
      gbeta_[l] += grads.dbeta.colwise().sum().transpose();
    }
    dy = cls_[l].backward(cache.cls_x[l], grads.dx);
  }
  if (use_hyper_) hyper_.backward(cache.hyper, dhyper);

  const Eigen::Index cq = static_cast<Eigen::Index>(shape_.feat_q.back());
  const MatX<T> dhq = dy.leftCols(cq);
  const MatX<T> dho = dy.rightCols(dy.cols() - cq);
  feat_q_.backward(cache.q, dhq);
  const MatX<T> dof = nn::MaxPool<T>::backward(cache.pool, dho);
  feat_o_.backward(cache.o, dof);
  return loss;
}

template <class T>
double LevelRouter<T>::loss_only(std::span<const LabeledSample> batch_samples) const {
  std::vector<RoutingSample> samples(batch_samples.size());
  std::vector<int> node_ids(batch_samples.size());
  std::vector<int> labels(batch_samples.size());
  for (std::size_t i = 0; i < batch_samples.size(); ++i) {
    samples[i] = batch_samples[i].sample;
    node_ids[i] = batch_samples[i].node_id;
    labels[i] = batch_samples[i].label;
  }
  const Batch batch = assemble(samples, node_ids, labels);
  const MatX<T> logits = forward_impl(batch, nullptr);
  const MatX<T> probs = nn::SoftmaxCE<T>::probabilities(logits, batch.mask);
  double loss = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    loss -= std::log(std::max(static_cast<double>(probs(r, batch.classes[r])), 1e-300));
  return loss / static_cast<double>(probs.rows());
}

template <class T>
void LevelRouter<T>::adam_step(double lr) {
  ++adam_.step;
  auto upd = [&](nn::Dense<T>& d) {
    adam_.update(d.w.data(), d.gw.data(), d.mw.data(), d.vw.data(),
                 static_cast<std::size_t>(d.w.size()), lr);
    adam_.update(d.b.data(), d.gb.data(), d.mb.data(), d.vb.data(),
                 static_cast<std::size_t>(d.b.size()), lr);
  };
  for (auto& l : feat_q_.layers) upd(l);
  for (auto& l : feat_o_.layers) upd(l);
  for (auto& l : cls_) upd(l);
  for (auto& l : hyper_.layers) upd(l);
  for (std::size_t l = 0; l < gamma_.size(); ++l) {
    adam_.update(gamma_[l].data(), ggamma_[l].data(), mgamma_[l].data(), vgamma_[l].data(),
                 static_cast<std::size_t>(gamma_[l].size()), lr);
    adam_.update(beta_[l].data(), gbeta_[l].data(), mbeta_[l].data(), vbeta_[l].data(),
                 static_cast<std::size_t>(beta_[l].size()), lr);
  }
}

template <class T>
TrainLog LevelRouter<T>::train(std::span<const LabeledSample> samples, const TrainConfig& cfg) {
  if (samples.empty()) throw Error("LevelRouter: no training samples");
  if (cfg.epochs < 1 || cfg.batch < 1 || cfg.lr <= 0) throw Error("LevelRouter: bad TrainConfig");
  adam_.beta1 = cfg.beta1;
  adam_.beta2 = cfg.beta2;
  adam_.eps = cfg.adam_eps;
  adam_.step = 0;

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(level_), 0x747261696eull);

  TrainLog log;
  std::vector<LabeledSample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = learning_rate_at(cfg, epoch);
    double loss_sum = 0;
    std::size_t seen = 0;
    long correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
      const double loss = loss_and_grad(batch);
      if (!std::isfinite(loss))
        throw Error("training diverged at epoch " + std::to_string(epoch));
      adam_step(lr);
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      correct += last_correct_;
    }
    log.loss.push_back(loss_sum / static_cast<double>(seen));
    log.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(seen));
  }
  return log;
}

template <class T>
std::pair<double, double> LevelRouter<T>::evaluate(std::span<const LabeledSample> samples,
                                                   int eval_batch) const {
  if (samples.empty()) throw Error("LevelRouter: nothing to evaluate");
  double loss_sum = 0;
  long correct = 0;
  std::vector<RoutingSample> batch_samples;
  std::vector<int> node_ids, labels;
  for (std::size_t start = 0; start < samples.size(); start += eval_batch) {
    const std::size_t end = std::min(samples.size(), start + eval_batch);
    batch_samples.clear();
    node_ids.clear();
    labels.clear();
    for (std::size_t i = start; i < end; ++i) {
      batch_samples.push_back(samples[i].sample);
      node_ids.push_back(samples[i].node_id);
      labels.push_back(samples[i].label);
    }
    const Batch batch = assemble(batch_samples, node_ids, labels);
    const MatX<T> logits = forward_impl(batch, nullptr);
    const MatX<T> probs = nn::SoftmaxCE<T>::probabilities(logits, batch.mask);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      loss_sum -= std::log(std::max(static_cast<double>(probs(r, batch.classes[r])), 1e-300));
      Eigen::Index arg = 0;
      probs.row(r).maxCoeff(&arg);
      if (static_cast<int>(arg) == batch.classes[r]) ++correct;
    }
  }
  return {loss_sum / static_cast<double>(samples.size()),
          static_cast<double>(correct) / static_cast<double>(samples.size())};
}

template <class T>
std::vector<ParamView<T>> LevelRouter<T>::parameters() {
  std::vector<ParamView<T>> views;
  auto add = [&](const std::string& name, nn::Dense<T>& d) {
    views.push_back({name + ".w", d.w.data(), d.gw.data(), static_cast<std::size_t>(d.w.size())});
    views.push_back({name + ".b", d.b.data(), d.gb.data(), static_cast<std::size_t>(d.b.size())});
  };
  for (std::size_t i = 0; i < feat_q_.layers.size(); ++i)
    add("feat_q." + std::to_string(i), feat_q_.layers[i]);
  for (std::size_t i = 0; i < feat_o_.layers.size(); ++i)
    add("feat_o." + std::to_string(i), feat_o_.layers[i]);
  for (std::size_t i = 0; i < cls_.size(); ++i) add("classifier." + std::to_string(i), cls_[i]);
  for (std::size_t i = 0; i < hyper_.layers.size(); ++i)
    add("hyper." + std::to_string(i), hyper_.layers[i]);
  for (std::size_t l = 0; l < gamma_.size(); ++l) {
    views.push_back({"affine.gamma." + std::to_string(l), gamma_[l].data(), ggamma_[l].data(),
                     static_cast<std::size_t>(gamma_[l].size())});
    views.push_back({"affine.beta." + std::to_string(l), beta_[l].data(), gbeta_[l].data(),
                     static_cast<std::size_t>(beta_[l].size())});
  }
  return views;
}

template <class T>
std::int64_t LevelRouter<T>::parameter_count() const {
  std::int64_t n = 0;
  auto count = [&](const nn::Mlp<T>& mlp) {
    for (const auto& l : mlp.layers) n += l.w.size() + l.b.size();
  };
  count(feat_q_);
  count(feat_o_);
  for (const auto& l : cls_) n += l.w.size() + l.b.size();
  count(hyper_);
  for (const auto& v : gamma_) n += v.size();
  for (const auto& v : beta_) n += v.size();
  return n;
}

template <class T>
void LevelRouter<T>::serialize(std::ostream& os) const {
  io::write_magic(os, kWeightsMagic);
  io::write_scalar<std::uint32_t>(os, kWeightsVersion);
  io::write_scalar<std::int32_t>(os, level_);
  io::write_scalar<std::uint32_t>(os, 5);  // META, FTQ_, FTO_, CLS_, HYPR or AFF_

  io::write_magic(os, "META");
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(branching_));
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(context_n_));
  io::write_scalar<std::uint8_t>(os, outlier_slot_ ? 1 : 0);
  io::write_scalar<std::uint8_t>(os, use_hyper_ ? 1 : 0);
  write_widths(os, shape_.feat_q);
  write_widths(os, shape_.feat_o);
  write_widths(os, shape_.classifier_hidden);
  write_widths(os, shape_.hyper_hidden);
  io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(node_order_.size()));
  for (int id : node_order_) io::write_scalar<std::int32_t>(os, id);
  for (Eigen::Index r = 0; r < node_mask_.rows(); ++r)
    for (Eigen::Index c = 0; c < node_mask_.cols(); ++c)
      io::write_scalar<std::uint8_t>(os, node_mask_(r, c));

  auto write_mlp = [&](const char tag[4], const std::vector<nn::Dense<T>>& layers) {
    io::write_magic(os, tag);
    io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(layers.size()));
    for (const auto& l : layers) {
      write_tensor(os, l.w);
      write_tensor(os, l.b);
    }
  };
  write_mlp("FTQ_", feat_q_.layers);
  write_mlp("FTO_", feat_o_.layers);
  write_mlp("CLS_", cls_);
  if (use_hyper_) {
    write_mlp("HYPR", hyper_.layers);
  } else {
    io::write_magic(os, "AFF_");
    io::write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(gamma_.size()));
    for (std::size_t l = 0; l < gamma_.size(); ++l) {
      write_tensor(os, gamma_[l]);
      write_tensor(os, beta_[l]);
    }
  }
}

template <class T>
LevelRouter<T> LevelRouter<T>::deserialize(std::istream& is) {
  io::expect_magic(is, kWeightsMagic, "weights file");
  if (io::read_scalar<std::uint32_t>(is, "weights version") != kWeightsVersion)
    throw Error("weights file: unsupported version");
  LevelRouter router;
  router.level_ = io::read_scalar<std::int32_t>(is, "weights level");
  io::read_scalar<std::uint32_t>(is, "weights section count");

  io::expect_magic(is, "META", "weights META section");
  router.branching_ = static_cast<int>(io::read_scalar<std::uint32_t>(is, "branching"));
  router.context_n_ = static_cast<int>(io::read_scalar<std::uint32_t>(is, "context count"));
  router.outlier_slot_ = io::read_scalar<std::uint8_t>(is, "outlier flag") != 0;
  router.use_hyper_ = io::read_scalar<std::uint8_t>(is, "hyper flag") != 0;
  router.shape_.feat_q = read_widths(is);
  router.shape_.feat_o = read_widths(is);
  router.shape_.classifier_hidden = read_widths(is);
  router.shape_.hyper_hidden = read_widths(is);
  const auto nodes = io::read_scalar<std::uint32_t>(is, "node count");
  router.node_order_.resize(nodes);
  for (auto& id : router.node_order_) id = io::read_scalar<std::int32_t>(is, "node id");
  for (std::size_t i = 0; i < router.node_order_.size(); ++i)
    router.node_index_[router.node_order_[i]] = static_cast<int>(i);
  router.node_mask_.resize(nodes, router.branching_ + (router.outlier_slot_ ? 1 : 0));
  for (Eigen::Index r = 0; r < router.node_mask_.rows(); ++r)
    for (Eigen::Index c = 0; c < router.node_mask_.cols(); ++c)
      router.node_mask_(r, c) = io::read_scalar<std::uint8_t>(is, "node mask");

  auto read_mlp = [&](const char tag[4], std::vector<nn::Dense<T>>& layers) {
    io::expect_magic(is, tag, "weights section");
    const auto count = io::read_scalar<std::uint32_t>(is, "layer count");
    layers.resize(count);
    for (auto& l : layers) {
      read_tensor(is, l.w);
      read_tensor(is, l.b);
      l.reset_state();
    }
  };
  read_mlp("FTQ_", router.feat_q_.layers);
  router.feat_q_.relu_last = true;
  read_mlp("FTO_", router.feat_o_.layers);
  router.feat_o_.relu_last = true;
  read_mlp("CLS_", router.cls_);
  if (router.use_hyper_) {
    read_mlp("HYPR", router.hyper_.layers);
    router.hyper_.relu_last = false;
  } else {
    io::expect_magic(is, "AFF_", "weights affine section");
    const auto count = io::read_scalar<std::uint32_t>(is, "affine layer count");
    router.gamma_.resize(count);
    router.beta_.resize(count);
    for (std::uint32_t l = 0; l < count; ++l) {
      read_tensor(is, router.gamma_[l]);
      read_tensor(is, router.beta_[l]);
    }
    auto zeros_like = [](const std::vector<VecX<T>>& src) {
      std::vector<VecX<T>> out;
      for (const auto& v : src) out.push_back(VecX<T>::Zero(v.size()));
      return out;
    };
    router.ggamma_ = zeros_like(router.gamma_);
    router.gbeta_ = zeros_like(router.beta_);
    router.mgamma_ = zeros_like(router.gamma_);
    router.vgamma_ = zeros_like(router.gamma_);
    router.mbeta_ = zeros_like(router.beta_);
    router.vbeta_ = zeros_like(router.beta_);
  }
  return router;
}

template <class T>
LevelRouter<T> train_per_node(const PartitionTree& tree, int node_id,
                              std::span<const LabeledSample> samples, const NetShape& shape,
                              int context_n, const TrainConfig& cfg, TrainLog* log) {
  const TreeNode& node = tree.node(node_id);
  LevelRouter<T> router(tree, {node_id}, shape, context_n, /*use_hyper=*/false,
                        /*outlier_slot=*/node.level >= 1,
                        mix_seed(cfg.seed, static_cast<std::uint64_t>(node_id)));
  TrainLog local = router.train(samples, cfg);
  if (log) *log = std::move(local);
  return router;
}

void save_router(const LevelRouter<float>& router, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_router: cannot open " + path.string());
  router.serialize(os);
  if (!os) throw Error("save_router: write failed for " + path.string());
}

LevelRouter<float> load_router(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_router: cannot open " + path.string());
  return LevelRouter<float>::deserialize(is);
}

template class LevelRouter<float>;
template class LevelRouter<double>;
template LevelRouter<float> train_per_node<float>(const PartitionTree&, int,
                                                  std::span<const LabeledSample>, const NetShape&,
                                                  int, const TrainConfig&, TrainLog*);
template LevelRouter<double> train_per_node<double>(const PartitionTree&, int,
                                                    std::span<const LabeledSample>,
                                                    const NetShape&, int, const TrainConfig&,
                                                    TrainLog*);

}  // namespace nrt
