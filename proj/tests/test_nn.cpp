#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "nrt/neural_net.hpp"
#include "nrt/partition_tree.hpp"
#include "nrt/rng.hpp"

using namespace nrt;

namespace {

MatX<double> random_mat(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  MatX<double> m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = gauss(rng);
  return m;
}

// Central-difference gradient of a scalar functional wrt one entry.
template <class F>
double fd(F&& f, double* x, double h = 1e-6) {
  const double saved = *x;
  *x = saved + h;
  const double up = f();
  *x = saved - h;
  const double down = f();
  *x = saved;
  return (up - down) / (2 * h);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

TEST_CASE("dense layer gradients match finite differences") {
  auto rng = make_rng(81);
  nn::Dense<double> dense;
  dense.init(5, 4, rng);
  const MatX<double> x = random_mat(6, 5, rng);
  const MatX<double> w_loss = random_mat(6, 4, rng);  // random linear functional

  auto loss = [&] { return (dense.forward(x).array() * w_loss.array()).sum(); };

  dense.gw.setZero();
  dense.gb.setZero();
  const MatX<double> dx = dense.backward(x, w_loss);

  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c)
      CHECK(rel_err(dense.gw(r, c), fd(loss, &dense.w(r, c))) < 1e-6);
  for (int r = 0; r < 4; ++r) CHECK(rel_err(dense.gb[r], fd(loss, &dense.b[r])) < 1e-6);

  MatX<double> xm = x;
  auto loss_x = [&] { return (dense.forward(xm).array() * w_loss.array()).sum(); };
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 5; ++c) CHECK(rel_err(dx(r, c), fd(loss_x, &xm(r, c))) < 1e-6);
}

TEST_CASE("mlp with relu backpropagates exact gradients") {
  auto rng = make_rng(82);
  nn::Mlp<double> mlp;
  const std::vector<int> widths{7, 5};
  mlp.init(4, widths, true, rng);
  MatX<double> x = random_mat(5, 4, rng);
  const MatX<double> w_loss = random_mat(5, 5, rng);

  auto loss = [&] { return (mlp.forward(x).array() * w_loss.array()).sum(); };

  typename nn::Mlp<double>::Cache cache;
  mlp.forward(x, &cache);
  for (auto& l : mlp.layers) {
    l.gw.setZero();
    l.gb.setZero();
  }
  const MatX<double> dx = mlp.backward(cache, w_loss);

  for (auto& l : mlp.layers) {
    for (int r = 0; r < l.w.rows(); ++r)
      for (int c = 0; c < l.w.cols(); ++c)
        CHECK(rel_err(l.gw(r, c), fd(loss, &l.w(r, c))) < 1e-5);
    for (int r = 0; r < l.b.size(); ++r) CHECK(rel_err(l.gb[r], fd(loss, &l.b[r])) < 1e-5);
  }
  auto loss_x = [&] { return (mlp.forward(x).array() * w_loss.array()).sum(); };
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) CHECK(rel_err(dx(r, c), fd(loss_x, &x(r, c))) < 1e-5);
}

TEST_CASE("max pool routes gradients to the argmax rows") {
  auto rng = make_rng(83);
  MatX<double> x = random_mat(12, 3, rng);
  const MatX<double> w_loss = random_mat(4, 3, rng);

  typename nn::MaxPool<double>::Cache cache;
  nn::MaxPool<double>::forward(x, 3, &cache);
  const MatX<double> dx = nn::MaxPool<double>::backward(cache, w_loss);

  auto loss = [&] { return (nn::MaxPool<double>::forward(x, 3).array() * w_loss.array()).sum(); };
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 3; ++c) CHECK(rel_err(dx(r, c), fd(loss, &x(r, c))) < 1e-5);

  CHECK_THROWS(nn::MaxPool<double>::forward(x, 5));
}

TEST_CASE("layer norm gradients match finite differences") {
  auto rng = make_rng(84);
  MatX<double> x = random_mat(6, 8, rng, 2.0);
  MatX<double> gamma = random_mat(6, 8, rng).array() + 1.5;
  MatX<double> beta = random_mat(6, 8, rng);
  const MatX<double> w_loss = random_mat(6, 8, rng);

  typename nn::LayerNorm<double>::Cache cache;
  nn::LayerNorm<double>::forward(x, gamma, beta, &cache);
  const auto grads = nn::LayerNorm<double>::backward(cache, gamma, w_loss);

  auto loss = [&] {
    return (nn::LayerNorm<double>::forward(x, gamma, beta).array() * w_loss.array()).sum();
  };
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 8; ++c) {
      CHECK(rel_err(grads.dx(r, c), fd(loss, &x(r, c))) < 1e-4);
      CHECK(rel_err(grads.dgamma(r, c), fd(loss, &gamma(r, c))) < 1e-5);
      CHECK(rel_err(grads.dbeta(r, c), fd(loss, &beta(r, c))) < 1e-5);
    }
}

TEST_CASE("masked softmax cross-entropy: probabilities and gradient") {
  auto rng = make_rng(85);
  MatX<double> logits = random_mat(5, 6, rng);
  MatX<std::uint8_t> mask = MatX<std::uint8_t>::Ones(5, 6);
  mask(1, 3) = 0;
  mask(2, 0) = mask(2, 1) = 0;
  std::vector<int> labels{0, 2, 4, 1, 5};

  const MatX<double> p = nn::SoftmaxCE<double>::probabilities(logits, mask);
  for (int r = 0; r < 5; ++r) {
    CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (int c = 0; c < 6; ++c)
      if (!mask(r, c)) CHECK(p(r, c) == 0.0);
  }

  // Uniform logits spread probability over the active classes only.
  MatX<double> flat = MatX<double>::Zero(1, 6);
  MatX<std::uint8_t> m4 = MatX<std::uint8_t>::Ones(1, 6);
  m4(0, 5) = 0;
  std::vector<int> lab{2};
  const auto [uloss, ugrad] = nn::SoftmaxCE<double>::loss_and_grad(flat, m4, lab);
  CHECK(uloss == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  const auto [loss0, dlogits] = nn::SoftmaxCE<double>::loss_and_grad(logits, mask, labels);
  auto loss = [&] {
    double acc = 0;
    const MatX<double> pp = nn::SoftmaxCE<double>::probabilities(logits, mask);
    for (int r = 0; r < 5; ++r) acc -= std::log(pp(r, labels[r]));
    return acc / 5;
  };
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 6; ++c) {
      if (!mask(r, c)) {
        CHECK(dlogits(r, c) == 0.0);
        continue;
      }
      CHECK(rel_err(dlogits(r, c), fd(loss, &logits(r, c))) < 1e-5);
    }

  // A label on a masked class is a caller error.
  std::vector<int> bad{3};
  MatX<double> one = MatX<double>::Zero(1, 6);
  MatX<std::uint8_t> bm = MatX<std::uint8_t>::Ones(1, 6);
  bm(0, 3) = 0;
  CHECK_THROWS(nn::SoftmaxCE<double>::loss_and_grad(one, bm, bad));
}

namespace {

// Tree whose root splits into 4 quadrant children: the smallest shape a
// router can be built on.
PartitionTree quad_tree() {
  WorldPointCloud cloud;
  auto rng = make_rng(86);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  const double cx[4] = {0.25, 0.75, 0.25, 0.75};
  const double cy[4] = {0.25, 0.25, 0.75, 0.75};
  for (int q = 0; q < 4; ++q)
    for (int i = 0; i < 30; ++i) {
      OrientedPoint p;
      p.position = Vec3(cx[q] + jitter(rng) * 0.5, cy[q] + jitter(rng) * 0.5, 0.5 + jitter(rng));
      p.normal = Vec3(0, 0, 1);
      cloud.points.push_back(p);
    }
  cloud.provenance.resize(cloud.points.size());
  RootBox box;
  box.min_corner = Vec3(0, 0, 0);
  box.max_corner = Vec3(1, 1, 1);  // ties split x then y: children are xy quadrants
  return build_tree(cloud, box, 2, 4, 5);
}

NetShape tiny_shape() {
  NetShape s;
  s.feat_q = {8, 8};
  s.feat_o = {8, 12};
  s.classifier_hidden = {24, 16};
  s.hyper_hidden = {8};
  return s;
}

std::vector<LabeledSample> color_quadrant_samples(int n, int context_n, std::uint64_t seed,
                                                  int node_id) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabeledSample> out(n);
  for (auto& ls : out) {
    const double r = u(rng), g = u(rng);
    ls.sample.query_color = {static_cast<float>(r), static_cast<float>(g), 0.5f};
    ls.sample.context.resize(context_n * kContextDim);
    for (auto& v : ls.sample.context) v = static_cast<float>(u(rng));  // pure noise
    ls.node_id = node_id;
    ls.label = (r > 0.5 ? 1 : 0) + (g > 0.5 ? 2 : 0);
  }
  return out;
}

}  // namespace

TEST_CASE("router loss gradients match finite differences") {
  const PartitionTree tree = quad_tree();
  const int context_n = 4;

  for (const bool hyper : {true, false}) {
    CAPTURE(hyper);
    LevelRouter<double> router(tree, {tree.root_id()}, tiny_shape(), context_n, hyper,
                               /*outlier_slot=*/true, 87);
    auto samples = color_quadrant_samples(6, context_n, 88, tree.root_id());
    samples[5].label = kOutlierLabel;

    const double loss = router.loss_and_grad(samples);
    CHECK(std::isfinite(loss));

    auto views = router.parameters();
    auto loss_fn = [&] { return router.loss_only(samples); };
    auto check_rng = make_rng(89);
    int checked = 0;
    for (auto& view : views) {
      // Spot-check a handful of coordinates per tensor; a wrong backward
      // shows up everywhere, not in isolated entries.
      const int probes = std::min<std::size_t>(4, view.size);
      for (int i = 0; i < probes; ++i) {
        const std::size_t idx = check_rng() % view.size;
        const double analytic = view.grad[idx];
        const double numeric = fd(loss_fn, view.value + idx, 1e-5);
        if (std::abs(analytic) < 1e-12 && std::abs(numeric) < 1e-7) continue;
        CAPTURE(view.name);
        CAPTURE(idx);
        CHECK(rel_err(analytic, numeric) < 1e-4);
        ++checked;
      }
    }
    CHECK(checked > 20);
  }
}

TEST_CASE("router learns a linearly separable color rule") {
  const PartitionTree tree = quad_tree();
  const int context_n = 4;
  LevelRouter<float> router(tree, {tree.root_id()}, tiny_shape(), context_n,
                            /*use_hyper=*/true, /*outlier_slot=*/false, 90);

  auto train_set = color_quadrant_samples(2000, context_n, 91, tree.root_id());
  auto eval_set = color_quadrant_samples(500, context_n, 92, tree.root_id());

  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch = 64;
  cfg.lr = 1e-3;
  cfg.seed = 93;

  const TrainLog log = router.train(train_set, cfg);
  REQUIRE(log.loss.size() == 40);
  CHECK(log.loss.front() > log.loss.back());

  const auto [eval_loss, eval_acc] = router.evaluate(eval_set);
  CHECK(eval_acc > 0.95);
  CHECK(eval_loss < 0.2);
}

TEST_CASE("per-node ablation router trains without a hypernetwork") {
  const PartitionTree tree = quad_tree();
  const int context_n = 4;
  auto train_set = color_quadrant_samples(1500, context_n, 94, tree.root_id());

  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch = 64;
  cfg.lr = 1e-3;
  cfg.seed = 95;

  TrainLog log;
  auto router = train_per_node<float>(tree, tree.root_id(), train_set, tiny_shape(), context_n,
                                      cfg, &log);
  CHECK_FALSE(router.uses_hypernet());
  const auto [loss, acc] = router.evaluate(train_set);
  CHECK(acc > 0.9);
}

TEST_CASE("router rejects malformed inputs") {
  const PartitionTree tree = quad_tree();
  LevelRouter<float> router(tree, {tree.root_id()}, tiny_shape(), 4, true, false, 96);

  auto ok = color_quadrant_samples(4, 4, 97, tree.root_id());
  auto wrong_ctx = color_quadrant_samples(4, 8, 98, tree.root_id());
  CHECK_THROWS_AS(router.loss_and_grad(wrong_ctx), Error);

  auto outlier = ok;
  outlier[0].label = kOutlierLabel;  // no outlier slot on this router
  CHECK_THROWS_AS(router.loss_and_grad(outlier), Error);

  auto wrong_node = ok;
  wrong_node[0].node_id = 12345;
  CHECK_THROWS_AS(router.loss_and_grad(wrong_node), Error);
}

TEST_CASE("learning rate schedule halves at the configured cadence") {
  TrainConfig cfg;
  cfg.lr = 8e-3;
  cfg.lr_halve_every = 10;
  CHECK(learning_rate_at(cfg, 0) == doctest::Approx(8e-3));
  CHECK(learning_rate_at(cfg, 9) == doctest::Approx(8e-3));
  CHECK(learning_rate_at(cfg, 10) == doctest::Approx(4e-3));
  CHECK(learning_rate_at(cfg, 25) == doctest::Approx(2e-3));
}
