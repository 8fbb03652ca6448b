#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sage/attribution.hpp"
#include "sage/dictionaries.hpp"
#include "sage/projection.hpp"

namespace sage {

// --- Test 1 -------------------------------------------------------------------

// Replacement activation for one node of prompt i given its clean run.
using Reconstructor = std::function<Vector(std::size_t prompt_index, const NodeId& node, const ForwardResult& clean)>;

struct Test1Score {
  std::string group;
  std::string method;
  double sufficiency = 0.0;
  double necessity = 0.0;
  double l_clean = 0.0;
  double l_sufficiency = 0.0;
  double l_necessity = 0.0;
  double l_mean = 0.0;
  bool degenerate = false;  // |L_c − L_m| < 1e-6, scores undefined
};

inline constexpr double kDegenerateDenominator = 1e-6;

// Mean logit differences with the group's upstream nodes replaced by their
// reconstruction (sufficiency), by ā + (a − â) (necessity) and by ā (mean
// baseline). ā comes from the mean store.
Test1Score test1(const Model& model, const CrossSectionGroup& group, const std::string& method,
                 std::span<const TaskPrompt> prompts, const MeanStore& means, const Reconstructor& reconstruct);

Reconstructor identity_reconstructor();
Reconstructor mean_reconstructor(const MeanStore& means);
Reconstructor supervised_reconstructor(const std::map<NodeId, SupervisedFeatureDictionary>& dicts,
                                       std::span<const TaskPrompt> prompts, bool weighted);
Reconstructor sae_reconstructor(const SparseAutoencoder& sae);

// --- edits --------------------------------------------------------------------

// Selected SAE features of one projection with their coefficients.
struct FeatureSet {
  std::vector<std::size_t> ids;
  std::vector<Vector> directions;
  Vector coefficients;
};

FeatureSet feature_set(const SparseAutoencoder& sae, const ProjectionResult& projection);

struct SwapEdit {
  Vector edited;
  std::vector<std::pair<std::size_t, std::size_t>> swaps;  // (source index, target index) into the sets
  double distance = 0.0;                                   // ‖edited − a_t‖
  std::vector<double> trajectory;                          // distance after each applied round
};

// k rounds of the best single (remove source i, add target j) swap; stops
// early when no swap reduces the distance. Features are used at most once.
SwapEdit greedy_sae_edit(const FeatureSet& source, const FeatureSet& target, std::span<const double> a_s,
                         std::span<const double> a_t, int k);
// The greedy edit at every budget; rounds are shared since greedy is prefix-consistent.
std::vector<SwapEdit> greedy_sae_edit_path(const FeatureSet& source, const FeatureSet& target,
                                           std::span<const double> a_s, std::span<const double> a_t,
                                           std::span<const int> budgets);

// Exhaustive optimum over all edits of at most k ≤ 2 swaps; at most
// kBruteForceCap features per side.
SwapEdit brute_force_edit(const FeatureSet& source, const FeatureSet& target, std::span<const double> a_s,
                          std::span<const double> a_t, int k);
inline constexpr std::size_t kBruteForceCap = 64;

// Budget-k greedy edit shared across several nodes: each round applies the
// swap with the largest distance reduction at any node.
std::vector<SwapEdit> greedy_shared_edit(std::span<const FeatureSet> sources, std::span<const FeatureSet> targets,
                                         std::span<const Vector> a_s, std::span<const Vector> a_t, int k);
// result[b][node] for each budget.
std::vector<std::vector<SwapEdit>> greedy_shared_edit_path(std::span<const FeatureSet> sources,
                                                           std::span<const FeatureSet> targets,
                                                           std::span<const Vector> a_s, std::span<const Vector> a_t,
                                                           std::span<const int> budgets);

// --- Test 2 -------------------------------------------------------------------

enum class BudgetMode { PerNode, Shared };
std::string to_string(BudgetMode m);

// Edited activations result[b][node] for a source/target pair at each budget.
using NodeEditor = std::function<std::vector<std::vector<Vector>>(
    const CounterfactualPair& pair, const ForwardResult& source, const ForwardResult& target,
    std::span<const NodeId> nodes, std::span<const int> budgets)>;

NodeEditor ground_truth_editor();
// k = 0 leaves the activation alone; k ≥ 1 swaps the varied attribute's feature.
NodeEditor supervised_editor(const std::map<NodeId, SupervisedFeatureDictionary>& dicts);
NodeEditor sae_editor(const SparseAutoencoder& sae, BudgetMode mode);

struct EditRecord {
  std::size_t pair_index = 0;
  std::string from;
  std::string to;
  Token predicted_edit = 0;
  Token predicted_truth = 0;
};

struct EditOutcome {
  std::string group;
  std::string method;
  std::string mode;
  int k = 0;
  double success_rate = 0.0;
  std::vector<EditRecord> records;
};

std::vector<EditOutcome> test2_run(const Model& model, const CrossSectionGroup& group, const std::string& method,
                                   std::span<const CounterfactualPair> pairs, std::span<const int> budgets,
                                   const NodeEditor& editor, BudgetMode mode = BudgetMode::PerNode);

}  // namespace sage
