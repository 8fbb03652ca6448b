#include "sage/dictionaries.hpp"

#include <algorithm>

#include "sage/error.hpp"

namespace sage {

const Vector& SupervisedFeatureDictionary::feature(const std::string& attribute, const std::string& value) const {
  auto it = features.find({attribute, value});
  require(it != features.end(), "unknown_value", "dictionary has no feature for " + attribute + "=" + value);
  return it->second;
}

SupervisedFeatureDictionary fit_supervised(const NodeId& node, const Matrix& activations,
                                           std::span<const Assignment> assignments, const AttributeSchema& schema) {
  const std::size_t N = activations.rows();
  const std::size_t d = activations.cols();
  require(N == assignments.size(), "invalid_argument", "one assignment per activation row required");
  require(all_finite(activations.data()), "non_finite", "activations contain non-finite values");
  const std::size_t K = schema.total_values();
  require(N >= K, "insufficient_data",
          "need at least " + std::to_string(K) + " activations, got " + std::to_string(N));

  std::vector<FeatureKey> keys;
  std::map<FeatureKey, std::size_t> index;
  for (const auto& a : schema.attributes)
    for (const auto& v : a.values) {
      index[{a.name, v}] = keys.size();
      keys.push_back({a.name, v});
    }

  // Indicator columns per row.
  std::vector<std::vector<std::size_t>> active(N);
  std::vector<std::size_t> seen(K, 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (const auto& a : schema.attributes) {
      auto it = assignments[n].find(a.name);
      require(it != assignments[n].end(), "invalid_argument", "assignment misses attribute " + a.name);
      auto k = index.find({a.name, it->second});
      require(k != index.end(), "unknown_value", "value " + it->second + " not in schema for " + a.name);
      active[n].push_back(k->second);
      ++seen[k->second];
    }
  }
  for (std::size_t k = 0; k < K; ++k)
    require(seen[k] > 0, "unobserved_value", "attribute value never observed: " + keys[k].first + "=" + keys[k].second);

  SupervisedFeatureDictionary dict;
  dict.node = node;
  dict.mean.assign(d, 0.0);
  for (std::size_t n = 0; n < N; ++n) axpy(1.0, activations.row(n), dict.mean);
  for (double& v : dict.mean) v /= static_cast<double>(N);

  Matrix ctc(K, K);
  Matrix cta(K, d);
  for (std::size_t n = 0; n < N; ++n) {
    const auto row = activations.row(n);
    for (std::size_t a : active[n]) {
      for (std::size_t b : active[n]) ctc(a, b) += 1.0;
      auto dst = cta.row(a);
      for (std::size_t j = 0; j < d; ++j) dst[j] += row[j] - dict.mean[j];
    }
  }
  const Matrix u = matmul(pseudo_inverse(ctc), cta);  // K × d

  double sq = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const auto row = activations.row(n);
    for (std::size_t j = 0; j < d; ++j) {
      double pred = 0.0;
      for (std::size_t a : active[n]) pred += u(a, j);
      const double r = row[j] - dict.mean[j] - pred;
      sq += r * r;
    }
  }
  dict.residual_mse = sq / static_cast<double>(N * d);
  for (std::size_t k = 0; k < K; ++k) {
    const auto r = u.row(k);
    dict.features[keys[k]] = Vector(r.begin(), r.end());
  }
  return dict;
}

namespace {

std::vector<const Vector*> assignment_features(const SupervisedFeatureDictionary& dict, const Assignment& assignment) {
  std::vector<const Vector*> out;
  std::vector<std::string> attrs;
  for (const auto& [key, vec] : dict.features)
    if (attrs.empty() || attrs.back() != key.first) attrs.push_back(key.first);
  for (const auto& a : attrs) {
    auto it = assignment.find(a);
    require(it != assignment.end(), "invalid_argument", "assignment misses attribute " + a);
    out.push_back(&dict.feature(a, it->second));
  }
  return out;
}

}  // namespace

Vector reconstruct_unweighted(const SupervisedFeatureDictionary& dict, const Assignment& assignment) {
  Vector out = dict.mean;
  for (const Vector* f : assignment_features(dict, assignment)) axpy(1.0, *f, out);
  return out;
}

WeightedReconstruction reconstruct_weighted(const SupervisedFeatureDictionary& dict, const Assignment& assignment,
                                            std::span<const double> activation, bool centered) {
  require(activation.size() == dict.mean.size(), "invalid_argument", "activation has wrong dimension");
  const auto feats = assignment_features(dict, assignment);
  const std::size_t d = dict.mean.size();
  Matrix v(d, feats.size());
  for (std::size_t k = 0; k < feats.size(); ++k)
    for (std::size_t j = 0; j < d; ++j) v(j, k) = (*feats[k])[j];
  const Vector target = centered ? sub(activation, dict.mean) : Vector(activation.begin(), activation.end());
  WeightedReconstruction out;
  out.weights = solve_least_squares(v, target);
  out.reconstruction = dict.mean;
  axpy(1.0, matvec(v, out.weights), out.reconstruction);
  return out;
}

Vector supervised_edit(const SupervisedFeatureDictionary& dict, std::span<const double> activation,
                       const std::string& attribute, const std::string& from, const std::string& to) {
  require(activation.size() == dict.mean.size(), "invalid_argument", "activation has wrong dimension");
  const Vector& uf = dict.feature(attribute, from);
  const Vector& ut = dict.feature(attribute, to);
  Vector out(activation.begin(), activation.end());
  if (from == to) return out;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = out[j] - uf[j] + ut[j];
  return out;
}

}  // namespace sage
