#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sage/linalg.hpp"
#include "sage/model.hpp"
#include "sage/tasks.hpp"

namespace sage {

using FeatureKey = std::pair<std::string, std::string>;  // (attribute, value)

// Mean activation plus one direction per attribute value at one node.
struct SupervisedFeatureDictionary {
  NodeId node;
  Vector mean;
  std::map<FeatureKey, Vector> features;
  double residual_mse = 0.0;  // per entry, on the fit data

  const Vector& feature(const std::string& attribute, const std::string& value) const;
};

// Least-squares fit of centered activations onto attribute-value indicators
// with the pseudo-inverse of the indicator Gram matrix.
SupervisedFeatureDictionary fit_supervised(const NodeId& node, const Matrix& activations,
                                           std::span<const Assignment> assignments, const AttributeSchema& schema);

// ā + Σ u[attribute = value].
Vector reconstruct_unweighted(const SupervisedFeatureDictionary& dict, const Assignment& assignment);

struct WeightedReconstruction {
  Vector weights;  // one per attribute in dictionary order
  Vector reconstruction;
};

// Least-squares weights λ on the assignment's features. centered = true fits
// activation − ā, otherwise the raw activation.
WeightedReconstruction reconstruct_weighted(const SupervisedFeatureDictionary& dict, const Assignment& assignment,
                                            std::span<const double> activation, bool centered = true);

// activation − u[attribute = from] + u[attribute = to].
Vector supervised_edit(const SupervisedFeatureDictionary& dict, std::span<const double> activation,
                       const std::string& attribute, const std::string& from, const std::string& to);

}  // namespace sage
