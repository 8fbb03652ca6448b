#pragma once

#include <algorithm>
#include <cmath>

#include "sage/model.hpp"

namespace sage::testing {

// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// Central differences of the metric with respect to one node's activation,
// perturbing through a node patch.
inline Vector node_fd_gradient(const Model& model, std::span<const Token> tokens, const Metric& metric,
                               const NodeId& node, double h = 1e-5) {
  const auto base = model.forward(tokens);
  const auto a = base.cache.at(node);
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    Vector plus(a.begin(), a.end()), minus(a.begin(), a.end());
    plus[i] += h;
    minus[i] -= h;
    const NodePatch pp{node, plus}, pm{node, minus};
    const double fp = metric.value(model.run_with_node_patch(tokens, {&pp, 1}).logits());
    const double fm = metric.value(model.run_with_node_patch(tokens, {&pm, 1}).logits());
    out[i] = (fp - fm) / (2 * h);
  }
  return out;
}

// Central differences with respect to every entry of one parameter tensor.
inline Vector param_fd_gradient(const ModelWeights& weights, const std::string& tensor, std::span<const Token> tokens,
                                const Metric& metric, double h = 1e-5) {
  std::size_t n = 0;
  weights.for_each_tensor([&](const std::string& name, const std::vector<double>& d, const auto&) {
    if (name == tensor) n = d.size();
  });
  Vector out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto eval = [&](double delta) {
      ModelWeights w = weights;
      w.for_each_tensor([&](const std::string& name, std::vector<double>& d, const auto&) {
        if (name == tensor) d[i] += delta;
      });
      return metric.value(Model(std::move(w)).forward(tokens).logits());
    };
    out[i] = (eval(h) - eval(-h)) / (2 * h);
  }
  return out;
}

inline Vector param_gradient(const ModelWeights& grad, const std::string& tensor) {
  Vector out;
  grad.for_each_tensor([&](const std::string& name, const std::vector<double>& d, const auto&) {
    if (name == tensor) out = d;
  });
  return out;
}

// A metric exercising the linear, quadratic and cross-entropy terms.
inline Metric mixed_metric(int vocab) {
  Metric m;
  m.linear = {{0, 1.0}, {1 % vocab, -0.7}};
  m.quadratic_token = 2 % vocab;
  m.quadratic_coef = 0.05;
  m.ce_target = 3 % vocab;
  return m;
}

}  // namespace sage::testing
