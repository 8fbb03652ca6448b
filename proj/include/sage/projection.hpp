#pragma once

#include <optional>
#include <span>
#include <vector>

#include "sage/dictionaries.hpp"
#include "sage/model.hpp"
#include "sage/training.hpp"

namespace sage {

struct SaeReconstruction {
  Vector codes;
  Vector reconstruction;
};

SaeReconstruction sae_reconstruct_residual(const SparseAutoencoder& sae, std::span<const double> x);

struct ProjectionResult {
  std::vector<std::size_t> active;    // features with c_i > 0 at the residual
  Vector alignment;                   // h · f_i over active
  std::vector<std::size_t> selected;  // subset of active
  Vector coefficients;                // over selected
  Vector reconstruction;
  bool empty = false;  // no active features; reconstruction is zero
};

// Reconstructs a sublayer output h from the SAE features active at the
// residual x_resid. Features whose alignment reaches the threshold (default:
// mean alignment over the active set) are fit to h by least squares.
ProjectionResult project_sublayer(const SparseAutoencoder& sae, std::span<const double> x_resid,
                                  std::span<const double> h, std::optional<double> fixed_threshold = {});

// Reconstruction of a cross-section's upstream node from a forward cache.
Vector reconstruct_cross_section(const SparseAutoencoder& sae, const ActivationCache& cache, const NodeId& node,
                                 ProjectionResult* detail = nullptr);
Vector reconstruct_cross_section(const SupervisedFeatureDictionary& dict, const ActivationCache& cache,
                                 const Assignment& assignment, bool weighted = true);

}  // namespace sage
