#pragma once

#include "helpers.hpp"
#include "sage/evaluation.hpp"

namespace sage::testing {

struct EditInstance {
  FeatureSet source, target;
  Vector a_s, a_t;
};

inline FeatureSet random_feature_set(std::size_t n, std::size_t d, Rng& rng) {
  FeatureSet f;
  std::uniform_real_distribution<double> c(0.2, 2.0);
  for (std::size_t i = 0; i < n; ++i) {
    f.ids.push_back(i);
    auto v = random_vector(d, rng);
    const double nv = norm(v);
    for (auto& x : v) x /= nv;
    f.directions.push_back(std::move(v));
    f.coefficients.push_back(c(rng));
  }
  return f;
}

// Activations built from the feature sets plus a residual, so that swaps matter.
inline EditInstance random_edit_instance(Rng& rng, std::size_t d = 12) {
  std::uniform_int_distribution<std::size_t> size(1, 9);
  EditInstance e;
  e.source = random_feature_set(size(rng), d, rng);
  e.target = random_feature_set(size(rng), d, rng);
  const auto common = random_vector(d, rng, 0.3);
  e.a_s = common;
  e.a_t = common;
  for (std::size_t i = 0; i < e.source.directions.size(); ++i)
    axpy(e.source.coefficients[i], e.source.directions[i], e.a_s);
  for (std::size_t j = 0; j < e.target.directions.size(); ++j)
    axpy(e.target.coefficients[j], e.target.directions[j], e.a_t);
  axpy(1.0, random_vector(d, rng, 0.05), e.a_t);
  return e;
}

}  // namespace sage::testing
