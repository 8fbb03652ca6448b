#pragma once

#include <map>
#include <random>

#include "helpers.hpp"
#include "sage/dictionaries.hpp"

namespace sage::testing {

// Activations a = ā + Σ_i u[a_i = v] + σ·noise over random assignments.
struct SyntheticActivations {
  AttributeSchema schema;
  Vector mean;
  std::map<FeatureKey, Vector> features;
  std::vector<Assignment> assignments;
  Matrix activations;
};

inline SyntheticActivations make_synthetic(std::size_t n, std::size_t d, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  SyntheticActivations s;
  s.schema.attributes = {{"color", {"red", "green", "blue"}}, {"shape", {"box", "ball", "cone", "ring"}},
                         {"size", {"small", "large"}}};
  s.mean = random_vector(d, rng);
  for (const auto& a : s.schema.attributes)
    for (const auto& v : a.values) s.features[{a.name, v}] = random_vector(d, rng);
  s.activations = Matrix(n, d);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t r = 0; r < n; ++r) {
    Assignment as;
    auto row = s.activations.row(r);
    std::copy(s.mean.begin(), s.mean.end(), row.begin());
    for (const auto& a : s.schema.attributes) {
      std::uniform_int_distribution<std::size_t> pick(0, a.values.size() - 1);
      const auto& v = a.values[pick(rng)];
      as[a.name] = v;
      axpy(1.0, s.features.at({a.name, v}), row);
    }
    if (sigma > 0.0)
      for (auto& x : row) x += noise(rng);
    s.assignments.push_back(std::move(as));
  }
  return s;
}

// Largest squared residual of the unweighted reconstruction over the rows.
inline double max_reconstruction_residual(const SupervisedFeatureDictionary& dict, const SyntheticActivations& s) {
  double worst = 0.0;
  for (std::size_t r = 0; r < s.activations.rows(); ++r) {
    const auto rec = reconstruct_unweighted(dict, s.assignments[r]);
    const auto row = s.activations.row(r);
    double e = 0.0;
    for (std::size_t i = 0; i < rec.size(); ++i) e += (rec[i] - row[i]) * (rec[i] - row[i]);
    worst = std::max(worst, std::sqrt(e));
  }
  return worst;
}

}  // namespace sage::testing
