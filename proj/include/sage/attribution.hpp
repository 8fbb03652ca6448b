#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sage/model.hpp"
#include "sage/tasks.hpp"

namespace sage {

// Positionwise mean of every node's activation over a prompt set.
struct MeanStore {
  NodeTensors means;
  std::size_t count = 0;

  static MeanStore compute(const Model& model, std::span<const std::vector<Token>> prompts);
  bool contains(const NodeId& node) const { return count > 0 && means.contains(node); }
  Vector mean(const NodeId& node) const;
};

struct EdgeInventoryOptions {
  int first_position = 0;      // downstream positions >= this are in scope
  bool include_mlp = false;    // MLP outputs as upstream, MLP inputs as downstream
  bool include_embed = false;  // Embed as upstream
};

// Upstream writes into later reads, ordered lexicographically.
std::vector<EdgeId> edge_inventory(const ModelConfig& config, int seq_len, const EdgeInventoryOptions& options);

enum class Estimator { Basic, Integrated, CleanCorrupt };

std::string to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);

// Per-edge scores for one counterfactual pair, aligned with edges. The metric
// is evaluated on the clean prompt's target and contrast.
std::vector<double> attribution_basic(const Model& model, const CounterfactualPair& pair, const Metric& metric,
                                      std::span<const EdgeId> edges);
std::vector<double> attribution_clean_corrupt(const Model& model, const CounterfactualPair& pair,
                                              const Metric& metric, std::span<const EdgeId> edges);
std::vector<double> attribution_integrated(const Model& model, const CounterfactualPair& pair,
                                           const Metric& metric, std::span<const EdgeId> edges, int steps);

// Metric - metric(clean) when the edge reads the corrupt upstream value.
double patching_effect(const Model& model, const CounterfactualPair& pair, const Metric& metric,
                       const EdgeId& edge);

struct EdgeScore {
  EdgeId edge;
  double score = 0.0;
};

struct EdgeScoreTable {
  std::string attribute;
  std::string metric = "logit_diff";
  std::string estimator;
  std::size_t pair_count = 0;
  std::vector<EdgeScore> scores;  // inventory order
};

struct AttributionConfig {
  Estimator estimator = Estimator::CleanCorrupt;
  int ig_steps = 5;
};

EdgeScoreTable average_attributions(const Model& model, std::span<const CounterfactualPair> pairs,
                                    std::span<const EdgeId> edges, const AttributionConfig& config);

enum class Sign { Positive, Negative };
std::string to_string(Sign s);

struct CrossSectionGroup {
  std::string attribute;
  Sign sign = Sign::Positive;
  std::vector<EdgeId> edges;  // by |score| descending, ties by EdgeId
  std::vector<double> scores;
  std::size_t selected_subset_size = 0;
  double max_effect = 0.0;  // filled by filter_groups

  std::string id() const { return attribute + "-" + to_string(sign); }
  // Distinct upstream nodes of the selected prefix, in first-appearance order.
  std::vector<NodeId> upstream_nodes() const;
};

struct GroupFormation {
  std::vector<CrossSectionGroup> groups;  // positive then negative; empty groups omitted
  bool all_zero = false;
};

GroupFormation form_groups(const EdgeScoreTable& table, std::size_t top_n);

// Logits with each listed edge reading the upstream node's mean.
Matrix edge_mean_ablation(const Model& model, std::span<const Token> tokens, std::span<const EdgeId> edges,
                          const MeanStore& means);

struct FilterResult {
  std::vector<CrossSectionGroup> kept;
  std::vector<CrossSectionGroup> dropped;
  double mean_effect = 0.0;
};

// 1, 2, 4, ... and n itself.
std::vector<std::size_t> subset_ladder(std::size_t n);

FilterResult filter_groups(const Model& model, std::vector<CrossSectionGroup> groups,
                           std::span<const TaskPrompt> prompts, const MeanStore& means, double drop_ratio);

// --- JSON ---------------------------------------------------------------------

std::string edge_table_to_json(const EdgeScoreTable& table);
EdgeScoreTable edge_table_from_json(const std::string& text);
std::string groups_to_json(std::span<const CrossSectionGroup> groups);
std::vector<CrossSectionGroup> groups_from_json(const std::string& text);

}  // namespace sage
