#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sage/parallel.hpp"
#include "sage/training.hpp"

namespace sage {

Vector SparseAutoencoder::encode(std::span<const double> x) const {
  require(x.size() == input_dim(), "invalid_argument", "SAE input has wrong dimension");
  const Vector centered = sub(x, b_dec);
  Vector c = matvec(w_enc, centered);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::max(0.0, c[i] + b_enc[i]);
  return c;
}

Vector SparseAutoencoder::decode(std::span<const double> codes) const {
  require(codes.size() == latent_dim(), "invalid_argument", "SAE code has wrong dimension");
  Vector x = b_dec;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] == 0.0) continue;
    for (std::size_t r = 0; r < x.size(); ++r) x[r] += w_dec(r, i) * codes[i];
  }
  return x;
}

double sae_loss(const SparseAutoencoder& sae, std::span<const double> x, double l1_coef) {
  const Vector c = sae.encode(x);
  const Vector xh = sae.decode(c);
  double loss = 0.0;
  for (std::size_t r = 0; r < x.size(); ++r) loss += (xh[r] - x[r]) * (xh[r] - x[r]);
  for (double v : c) loss += l1_coef * v;
  return loss;
}

void sae_loss_gradient(const SparseAutoencoder& sae, std::span<const double> x, double l1_coef,
                       SparseAutoencoder& grad) {
  const std::size_t d = sae.input_dim();
  const std::size_t m = sae.latent_dim();
  const Vector centered = sub(x, sae.b_dec);
  Vector pre = matvec(sae.w_enc, centered);
  for (std::size_t i = 0; i < m; ++i) pre[i] += sae.b_enc[i];
  Vector c(m);
  for (std::size_t i = 0; i < m; ++i) c[i] = std::max(0.0, pre[i]);
  const Vector xh = sae.decode(c);
  Vector r2(d);
  for (std::size_t r = 0; r < d; ++r) r2[r] = 2.0 * (xh[r] - x[r]);

  // decoder and its bias (b_dec also enters through the encoder's centering)
  for (std::size_t r = 0; r < d; ++r) {
    grad.b_dec[r] += r2[r];
    for (std::size_t i = 0; i < m; ++i)
      if (c[i] != 0.0) grad.w_dec(r, i) += r2[r] * c[i];
  }
  Vector dpre(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (pre[i] <= 0.0) continue;
    double g = l1_coef;
    for (std::size_t r = 0; r < d; ++r) g += sae.w_dec(r, i) * r2[r];
    dpre[i] = g;
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (dpre[i] == 0.0) continue;
    grad.b_enc[i] += dpre[i];
    auto row = grad.w_enc.row(i);
    for (std::size_t r = 0; r < d; ++r) row[r] += dpre[i] * centered[r];
    const auto we = sae.w_enc.row(i);
    for (std::size_t r = 0; r < d; ++r) grad.b_dec[r] -= dpre[i] * we[r];
  }
}

void normalize_decoder(SparseAutoencoder& sae) {
  const std::size_t d = sae.input_dim();
  for (std::size_t i = 0; i < sae.latent_dim(); ++i) {
    double n = 0.0;
    for (std::size_t r = 0; r < d; ++r) n += sae.w_dec(r, i) * sae.w_dec(r, i);
    n = std::sqrt(n);
    if (n < 1e-12) continue;
    for (std::size_t r = 0; r < d; ++r) sae.w_dec(r, i) /= n;
    for (double& v : sae.w_enc.row(i)) v *= n;
    sae.b_enc[i] *= n;
  }
}

namespace {

SparseAutoencoder zeros_like(const SparseAutoencoder& s) {
  SparseAutoencoder z;
  z.w_enc = Matrix(s.w_enc.rows(), s.w_enc.cols());
  z.b_enc = Vector(s.b_enc.size(), 0.0);
  z.w_dec = Matrix(s.w_dec.rows(), s.w_dec.cols());
  z.b_dec = Vector(s.b_dec.size(), 0.0);
  z.layer = s.layer;
  return z;
}

std::vector<std::vector<double>*> sae_tensors(SparseAutoencoder& s) {
  return {&s.w_enc.data(), &s.b_enc, &s.w_dec.data(), &s.b_dec};
}

}  // namespace

SaeTrainResult train_sae(const Matrix& activations, const SaeConfig& config) {
  const std::size_t n = activations.rows();
  const std::size_t d = activations.cols();
  require(n > 0 && d > 0, "invalid_argument", "no activations to train on");
  require(config.latent_dim >= 1 && config.epochs >= 1 && config.batch_size >= 1, "invalid_config",
          "latent_dim, epochs and batch_size must be >= 1");
  require(config.l1_coef >= 0.0, "invalid_config", "l1 coefficient must be >= 0");
  require(all_finite(activations.data()), "non_finite", "activations contain non-finite values");
  const std::size_t m = static_cast<std::size_t>(config.latent_dim);

  Rng rng(config.seed);
  SparseAutoencoder sae;
  sae.w_dec = Matrix(d, m);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : sae.w_dec.data()) v = normal(rng);
  sae.b_dec = Vector(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0 / static_cast<double>(n), activations.row(i), sae.b_dec);
  sae.b_enc = Vector(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double nn = 0.0;
    for (std::size_t r = 0; r < d; ++r) nn += sae.w_dec(r, i) * sae.w_dec(r, i);
    nn = std::sqrt(nn);
    for (std::size_t r = 0; r < d; ++r) sae.w_dec(r, i) /= nn;
  }
  sae.w_enc = sae.w_dec.transpose();

  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  AdamConfig ac;
  ac.learning_rate = config.learning_rate;
  ac.beta2 = 0.999;
  ac.epsilon = 1e-8;
  ac.warmup_steps = 0;
  ac.min_lr_fraction = 0.1;
  Adam adam(ac, steps_per_epoch * static_cast<std::size_t>(config.epochs));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SaeTrainReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      const auto chunks = fixed_chunks(end - start);
      std::vector<SparseAutoencoder> partial(chunks.size());
      std::vector<double> losses(chunks.size(), 0.0);
      parallel_for(chunks.size(), [&](std::size_t c) {
        partial[c] = zeros_like(sae);
        for (std::size_t i = start + chunks[c].begin; i < start + chunks[c].end; ++i) {
          const auto x = activations.row(order[i]);
          losses[c] += sae_loss(sae, x, config.l1_coef);
          sae_loss_gradient(sae, x, config.l1_coef, partial[c]);
        }
      });
      SparseAutoencoder grad = zeros_like(sae);
      auto g = sae_tensors(grad);
      for (std::size_t c = 0; c < chunks.size(); ++c) {
        auto p = sae_tensors(partial[c]);
        for (std::size_t t = 0; t < g.size(); ++t)
          for (std::size_t j = 0; j < g[t]->size(); ++j) (*g[t])[j] += (*p[t])[j];
        epoch_loss += losses[c];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto* t : g)
        for (double& v : *t) v *= inv;
      auto params = sae_tensors(sae);
      std::vector<const std::vector<double>*> grads(g.begin(), g.end());
      adam.step(params, grads);
      normalize_decoder(sae);
    }
    epoch_loss /= static_cast<double>(n);
    require(std::isfinite(epoch_loss), "non_finite", "SAE loss became non-finite");
    report.epoch_loss.push_back(epoch_loss);
  }

  std::vector<double> sq(n, 0.0), l0(n, 0.0);
  std::vector<std::vector<char>> fired(n);
  parallel_for(n, [&](std::size_t i) {
    const auto x = activations.row(i);
    const Vector c = sae.encode(x);
    const Vector xh = sae.decode(c);
    for (std::size_t r = 0; r < d; ++r) sq[i] += (xh[r] - x[r]) * (xh[r] - x[r]);
    fired[i].assign(m, 0);
    for (std::size_t k = 0; k < m; ++k)
      if (c[k] > 0.0) {
        l0[i] += 1.0;
        fired[i][k] = 1;
      }
  });
  std::vector<char> alive(m, 0);
  for (const auto& f : fired)
    for (std::size_t k = 0; k < m; ++k) alive[k] |= f[k];
  report.reconstruction_mse = std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(n * d);
  report.mean_l0 = std::accumulate(l0.begin(), l0.end(), 0.0) / static_cast<double>(n);
  report.dead_fraction =
      static_cast<double>(std::count(alive.begin(), alive.end(), 0)) / static_cast<double>(m);
  return {std::move(sae), std::move(report)};
}

}  // namespace sage
