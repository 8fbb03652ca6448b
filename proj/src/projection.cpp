#include "sage/projection.hpp"

#include "sage/error.hpp"

namespace sage {

SaeReconstruction sae_reconstruct_residual(const SparseAutoencoder& sae, std::span<const double> x) {
  SaeReconstruction out;
  out.codes = sae.encode(x);
  out.reconstruction = sae.decode(out.codes);
  return out;
}

ProjectionResult project_sublayer(const SparseAutoencoder& sae, std::span<const double> x_resid,
                                  std::span<const double> h, std::optional<double> fixed_threshold) {
  const std::size_t d = sae.input_dim();
  require(h.size() == d, "invalid_argument", "sublayer output has wrong dimension");
  ProjectionResult out;
  const Vector codes = sae.encode(x_resid);
  for (std::size_t i = 0; i < codes.size(); ++i)
    if (codes[i] > 0.0) out.active.push_back(i);
  out.reconstruction.assign(d, 0.0);
  if (out.active.empty()) {
    out.empty = true;
    return out;
  }

  double mean = 0.0;
  for (std::size_t i : out.active) {
    double a = 0.0;
    for (std::size_t r = 0; r < d; ++r) a += h[r] * sae.w_dec(r, i);
    out.alignment.push_back(a);
    mean += a;
  }
  mean /= static_cast<double>(out.active.size());
  const double threshold = fixed_threshold.value_or(mean);
  for (std::size_t k = 0; k < out.active.size(); ++k)
    if (out.alignment[k] >= threshold) out.selected.push_back(out.active[k]);
  if (out.selected.empty()) return out;

  Matrix f(d, out.selected.size());
  for (std::size_t k = 0; k < out.selected.size(); ++k)
    for (std::size_t r = 0; r < d; ++r) f(r, k) = sae.w_dec(r, out.selected[k]);
  out.coefficients = solve_least_squares(f, h);
  out.reconstruction = matvec(f, out.coefficients);
  return out;
}

Vector reconstruct_cross_section(const SparseAutoencoder& sae, const ActivationCache& cache, const NodeId& node,
                                 ProjectionResult* detail) {
  require(cache.contains(node), "invalid_node", "node not in cache: " + to_string(node));
  const NodeId resid = NodeId::resid_post(sae.layer, node.position);
  const auto x = cache.at(resid);
  if (node.kind == NodeKind::ResidPost) {
    require(node.layer == sae.layer, "layer_mismatch", "SAE layer differs from the residual node's layer");
    return sae_reconstruct_residual(sae, x).reconstruction;
  }
  require(node.kind == NodeKind::AttnHeadOut || node.kind == NodeKind::MlpOut, "invalid_node",
          "SAE reconstruction needs a head, MLP or residual node: " + to_string(node));
  require(sae.layer >= node.layer, "layer_mismatch",
          "SAE at layer " + std::to_string(sae.layer) + " cannot see " + to_string(node));
  auto p = project_sublayer(sae, x, cache.at(node));
  Vector r = p.reconstruction;
  if (detail) *detail = std::move(p);
  return r;
}

Vector reconstruct_cross_section(const SupervisedFeatureDictionary& dict, const ActivationCache& cache,
                                 const Assignment& assignment, bool weighted) {
  if (!weighted) return reconstruct_unweighted(dict, assignment);
  return reconstruct_weighted(dict, assignment, cache.at(dict.node)).reconstruction;
}

}  // namespace sage
