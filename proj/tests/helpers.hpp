#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "sage/model.hpp"
#include "sage/tasks.hpp"
#include "sage/training.hpp"

namespace sage::testing {

inline ModelConfig small_config(int layers = 2, int heads = 2, int d = 16, int dh = 8, int mlp = 0, int vocab = 20,
                                std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_head = dh;
  c.d_mlp = mlp;
  c.vocab_size = vocab;
  c.max_seq = 24;
  c.seed = seed;
  return c;
}

inline std::vector<Token> random_tokens(int n, int vocab, Rng& rng) {
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<Token> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = d(rng);
  return t;
}

inline Vector random_vector(std::size_t n, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Vector v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  return Matrix(r, c, random_vector(r * c, rng, sd));
}

// Random SAE with unit-norm decoder columns.
inline SparseAutoencoder random_sae(std::size_t d, std::size_t m, Rng& rng, int layer = 0) {
  SparseAutoencoder s;
  s.w_dec = random_matrix(d, m, rng);
  for (std::size_t j = 0; j < m; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += s.w_dec(i, j) * s.w_dec(i, j);
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) s.w_dec(i, j) /= n;
  }
  s.w_enc = s.w_dec.transpose();
  s.b_enc = random_vector(m, rng, 0.1);
  s.b_dec = random_vector(d, rng, 0.1);
  s.layer = layer;
  return s;
}

inline TaskDefinition small_ioi() { return build_ioi_task({"Ann", "Bob", "Cal", "Dee"}); }

}  // namespace sage::testing
