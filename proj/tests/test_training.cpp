#include <doctest.h>

#include "gradcheck.hpp"
#include "helpers.hpp"
#include "sage/error.hpp"
#include "sage/training.hpp"

using namespace sage;
using namespace sage::testing;

TEST_CASE("Adam minimizes a quadratic") {
  AdamConfig ac;
  ac.learning_rate = 0.05;
  ac.warmup_steps = 0;
  Adam opt(ac, 2000);
  Vector x{3.0, -2.0, 1.5};
  for (int i = 0; i < 2000; ++i) {
    Vector g = x;  // grad of ½‖x‖²
    std::vector<double>* p[] = {&x};
    const std::vector<double>* gp[] = {&g};
    opt.step(p, gp);
  }
  for (double v : x) CHECK(std::abs(v) < 1e-2);
}

TEST_CASE("a tiny model learns to copy the first token") {
  const auto cfg = small_config(1, 2, 16, 8, 0, 6, 9);
  Rng rng(1);
  std::vector<Example> data;
  for (int i = 0; i < 400; ++i) {
    auto t = random_tokens(4, 6, rng);
    data.push_back({t, t[0]});
  }
  ModelTrainConfig tc;
  tc.epochs = 30;
  tc.adam.learning_rate = 1e-2;
  tc.target_accuracy = 0.9;
  const auto r = train_model(cfg, data, {}, tc);
  CHECK(r.report.accuracy >= 0.9);
  CHECK(r.report.loss_curve.front() > r.report.loss_curve.back());
  tc.epochs = 1;
  tc.adam.learning_rate = 1e-6;
  CHECK_THROWS_AS(train_model(cfg, data, {}, tc), TrainingError);
}

TEST_CASE("training is deterministic") {
  const auto cfg = small_config(1, 2, 8, 4, 0, 6, 2);
  Rng rng(2);
  std::vector<Example> data;
  for (int i = 0; i < 64; ++i) {
    auto t = random_tokens(3, 6, rng);
    data.push_back({t, t[1]});
  }
  ModelTrainConfig tc;
  tc.epochs = 2;
  tc.require_target = false;
  const auto a = train_model(cfg, data, {}, tc), b = train_model(cfg, data, {}, tc);
  CHECK(a.weights.embed == b.weights.embed);
  CHECK(a.report.loss_curve == b.report.loss_curve);
}

TEST_CASE("residual activation collection matches forward caches") {
  const auto cfg = small_config();
  const Model m(ModelWeights::init(cfg));
  Rng rng(3);
  std::vector<std::vector<Token>> seqs{random_tokens(5, cfg.vocab_size, rng), random_tokens(5, cfg.vocab_size, rng)};
  const auto all = collect_residual_activations_all(m, seqs, 1);
  CHECK(all.rows() == 10);
  const auto r = m.forward(seqs[1]);
  const auto row = r.cache.at(NodeId::resid_post(1, 2));
  CHECK(std::equal(row.begin(), row.end(), all.row(7).begin()));
  const std::vector<int> pos{-1, 0};
  const auto some = collect_residual_activations(m, seqs, 0, pos);
  const auto last = m.forward(seqs[0]).cache.at(NodeId::resid_post(0, 4));
  CHECK(std::equal(last.begin(), last.end(), some.row(0).begin()));
}

TEST_CASE("SAE gradient matches central differences") {
  Rng rng(4);
  auto sae = random_sae(6, 10, rng);
  const auto x = random_vector(6, rng);
  const double alpha = 0.3;
  SparseAutoencoder g;
  g.w_enc = Matrix(10, 6);
  g.b_enc.assign(10, 0.0);
  g.w_dec = Matrix(6, 10);
  g.b_dec.assign(6, 0.0);
  sae_loss_gradient(sae, x, alpha, g);
  auto check = [&](std::vector<double>& param, const std::vector<double>& grad) {
    Vector fd(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double keep = param[i];
      param[i] = keep + 1e-6;
      const double fp = sae_loss(sae, x, alpha);
      param[i] = keep - 1e-6;
      const double fm = sae_loss(sae, x, alpha);
      param[i] = keep;
      fd[i] = (fp - fm) / 2e-6;
    }
    CHECK(relative_error(grad, fd) < 1e-5);
  };
  check(sae.w_enc.data(), g.w_enc.data());
  check(sae.b_enc, g.b_enc);
  check(sae.w_dec.data(), g.w_dec.data());
  check(sae.b_dec, g.b_dec);
}

TEST_CASE("decoder normalization leaves the reconstruction unchanged") {
  Rng rng(5);
  auto sae = random_sae(5, 9, rng);
  for (auto& v : sae.w_dec.data()) v *= 2.5;
  const auto x = random_vector(5, rng);
  const auto before = sae.decode(sae.encode(x));
  normalize_decoder(sae);
  const auto after = sae.decode(sae.encode(x));
  for (std::size_t i = 0; i < 5; ++i) CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-12));
  for (std::size_t j = 0; j < 9; ++j) CHECK(norm(sae.feature(j)) == doctest::Approx(1.0));
}

TEST_CASE("SAE training reduces the loss and yields sparse codes") {
  Rng rng(6);
  // Data built from 12 sparse directions in 8 dimensions.
  const auto dirs = random_matrix(8, 12, rng);
  Matrix data(600, 8);
  std::uniform_int_distribution<int> pick(0, 11);
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (int k = 0; k < 2; ++k) {
      const int j = pick(rng);
      const double c = mag(rng);
      for (std::size_t i = 0; i < 8; ++i) data(r, i) += c * dirs(i, j);
    }
  SaeConfig sc;
  sc.latent_dim = 24;
  sc.epochs = 20;
  sc.l1_coef = 1e-2;
  sc.learning_rate = 5e-3;
  sc.seed = 3;
  const auto r = train_sae(data, sc);
  CHECK(r.report.epoch_loss.back() < r.report.epoch_loss.front());
  CHECK(r.report.mean_l0 < 24);
  CHECK(r.sae.latent_dim() == 24);
  const auto again = train_sae(data, sc);
  CHECK(again.sae.w_dec == r.sae.w_dec);
}
