#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sage/attribution.hpp"
#include "sage/dictionaries.hpp"
#include "sage/evaluation.hpp"
#include "sage/harness/config.hpp"
#include "sage/training.hpp"

namespace sage {

// --- in-memory stage results ---------------------------------------------------

struct ModelArtifact {
  ModelWeights weights;
  TrainReport report;
  TaskDefinition task;  // with any {seq} slots instantiated
  std::vector<InductionSample> samples;
  double task_accuracy = 0.0;  // on test-split prompts of the instantiated task
};

struct SaeArtifact {
  SparseAutoencoder sae;
  SaeTrainReport report;
};

struct DiscoverArtifact {
  MeanStore means;
  std::vector<EdgeScoreTable> tables;
  std::vector<CrossSectionGroup> formed;
  FilterResult filtered;
  std::vector<std::string> flags;  // e.g. all-zero tables
};

using DictionaryMap = std::map<NodeId, SupervisedFeatureDictionary>;

struct EvalArtifact {
  std::vector<Test1Score> test1;
  std::vector<EditOutcome> test2;
};

// --- stages --------------------------------------------------------------------

TaskDefinition stage_task_gen(const RunConfig& config);
ModelArtifact stage_model_train(const RunConfig& config, const TaskDefinition& task);
SaeArtifact stage_sae_train(const RunConfig& config, const ModelArtifact& model);
DiscoverArtifact stage_discover(const RunConfig& config, const ModelArtifact& model);
DictionaryMap stage_fit_dict(const RunConfig& config, const ModelArtifact& model, const DiscoverArtifact& discover);
std::vector<Test1Score> stage_eval_test1(const RunConfig& config, const ModelArtifact& model,
                                         const DiscoverArtifact& discover, const DictionaryMap& dicts,
                                         const SaeArtifact* sae);
std::vector<EditOutcome> stage_eval_test2(const RunConfig& config, const ModelArtifact& model,
                                          const DiscoverArtifact& discover, const DictionaryMap& dicts,
                                          const SaeArtifact* sae);

struct PipelineResult {
  TaskDefinition skeleton;
  ModelArtifact model;
  SaeArtifact sae;
  DiscoverArtifact discover;
  DictionaryMap dicts;
  EvalArtifact eval;
  std::string report_csv;
};

PipelineResult run_pipeline(const RunConfig& config);

// Last slot position of any schema attribute in the task's templates.
int last_attribute_position(const TaskDefinition& task);

// Prompts of one split with the stage's seed.
std::vector<TaskPrompt> sample_prompts(const Task& task, Split split, std::size_t count, std::uint64_t seed);
std::vector<CounterfactualPair> sample_pairs(const Task& task, Split split, const std::string& attribute,
                                             std::size_t count, std::uint64_t seed);

// --- persistence ---------------------------------------------------------------

void save_model_artifact(const std::filesystem::path& dir, const ModelArtifact& m);
ModelArtifact load_model_artifact(const std::filesystem::path& dir);
void save_sae_artifact(const std::filesystem::path& dir, const SaeArtifact& s);
SaeArtifact load_sae_artifact(const std::filesystem::path& dir);
void save_discover_artifact(const std::filesystem::path& dir, const DiscoverArtifact& d);
DiscoverArtifact load_discover_artifact(const std::filesystem::path& dir, const ModelConfig& config);
void save_dictionaries(const std::filesystem::path& dir, const DictionaryMap& dicts);
DictionaryMap load_dictionaries(const std::filesystem::path& dir);

// Rounds stored values to float32 so that in-memory results equal reloaded ones.
void round_to_float(SparseAutoencoder& sae);
void round_to_float(MeanStore& means);
void round_to_float(SupervisedFeatureDictionary& dict);

}  // namespace sage
