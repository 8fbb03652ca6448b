#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sage/attribution.hpp"
#include "sage/evaluation.hpp"
#include "sage/tasks.hpp"
#include "sage/training.hpp"

namespace sage {

struct TaskConfig {
  std::string kind = "induction";  // induction | ioi | file
  std::string path;                // task JSON for kind = file
  std::vector<std::string> feature_pool;
  std::vector<std::string> filler;
  int seq_length = 10;
};

struct TrainingSection {
  ModelTrainConfig train;
  InductionDataConfig induction;
  std::size_t task_examples = 4000;  // non-induction tasks
  std::size_t heldout = 500;
};

struct SamplerSection {
  InductionSamplerConfig sampler;
  int train_seqs = 2;
  int test_seqs = 1;
};

struct SaeSection {
  SaeConfig sae;
  int layer = -1;  // -1 = last layer
  std::size_t prompts = 1000;
  double random_fraction = 0.5;
};

struct AttributionSection {
  AttributionConfig attribution;
  std::size_t pairs = 250;
  std::size_t top_n = 64;
  double drop_ratio = 0.6;
  std::size_t filter_prompts = 250;
  std::size_t mean_prompts = 1000;
  bool include_mlp = false;
  bool include_embed = false;
  std::optional<int> first_position;  // default: last attribute slot
};

struct DictionarySection {
  std::size_t prompts = 10000;
};

struct EvaluationSection {
  std::size_t prompts = 250;
  std::vector<int> budgets{0, 4, 8, 16};
  std::vector<BudgetMode> modes{BudgetMode::PerNode};
};

struct Seeds {
  std::uint64_t task = 0, model = 0, shuffle = 0, sampler = 0, sae = 0, discover = 0, dictionary = 0, evaluation = 0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  TaskConfig task;
  ModelConfig model;
  TrainingSection training;
  SamplerSection sampler;
  SaeSection sae;
  AttributionSection attribution;
  DictionarySection dictionary;
  EvaluationSection evaluation;
  Seeds seeds;

  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// Per-stage seeds derived from the run seed; explicit "seeds" entries win.
Seeds derive_seeds(std::uint64_t seed);

// The desk-scale default: 2-layer attention-only model on the induction task.
RunConfig default_induction_config(std::uint64_t seed);

}  // namespace sage
