#pragma once

#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sage/model.hpp"

namespace sage {

using Rng = std::mt19937_64;
using Assignment = std::map<std::string, std::string>;

struct Attribute {
  std::string name;
  std::vector<std::string> values;
};

struct AttributeSchema {
  std::vector<Attribute> attributes;
  // Pairs of attributes that may never take the same value in one prompt.
  std::vector<std::pair<std::string, std::string>> distinct;

  void validate() const;
  bool has(const std::string& name) const;
  const Attribute& at(const std::string& name) const;
  std::size_t total_values() const;
};

// Closed-vocabulary word-level tokenizer. Words are split on whitespace and
// the punctuation characters , . ! ? ; : which become tokens of their own.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocabulary);

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& word) const { return ids_.contains(word); }
  Token id(const std::string& word) const;
  const std::string& word(Token t) const;
  const std::vector<std::string>& vocabulary() const { return words_; }

  std::vector<Token> tokenize(std::string_view text) const;
  // Words joined by single spaces, no space before punctuation.
  std::string detokenize(std::span<const Token> tokens) const;

  static std::vector<std::string> split_words(std::string_view text);
  static bool is_punctuation(std::string_view word);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, Token> ids_;
};

struct TemplatePart {
  bool slot = false;
  std::string text;  // literal word or slot name
};

struct PromptTemplate {
  std::string family;  // templates differing only in bound attributes share a family
  Assignment binds;    // attributes realized by the choice of template (e.g. order)
  std::string text;
  std::vector<TemplatePart> parts;

  static PromptTemplate parse(std::string family, Assignment binds, std::string text);
  std::size_t slot_count(const std::string& name) const;
  std::vector<int> slot_positions(const std::string& name) const;
  std::size_t length() const { return parts.size(); }
};

inline constexpr const char* kSeqSlot = "seq";

struct TaskDefinition {
  std::string name;
  AttributeSchema schema;
  std::vector<PromptTemplate> train_templates;
  std::vector<PromptTemplate> test_templates;
  std::string target_attribute;
  std::string contrast_attribute;
  std::vector<std::string> vocabulary;
  // Token pool for {seq} placeholders and random-token sequences.
  std::vector<std::string> filler;
  int seq_length = 10;

  void validate() const;
  bool has_seq_placeholder() const;
};

enum class Split { Train, Test };

// A task definition with its tokenizer.
class Task {
 public:
  explicit Task(TaskDefinition def);

  const TaskDefinition& definition() const { return def_; }
  const AttributeSchema& schema() const { return def_.schema; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  std::span<const PromptTemplate> templates(Split split) const;
  std::vector<Token> filler_tokens() const;

 private:
  TaskDefinition def_;
  Tokenizer tokenizer_;
};

struct TaskPrompt {
  std::vector<Token> tokens;
  Assignment assignment;
  Token target = 0;
  Token contrast = 0;
  std::size_t template_index = 0;
};

struct CounterfactualPair {
  TaskPrompt clean;
  TaskPrompt corrupt;
  std::string varied_attribute;
};

TaskPrompt render_prompt(const Task& task, std::span<const PromptTemplate> templates,
                         std::size_t template_index, const Assignment& assignment);

// Uniform draw over assignments satisfying the distinctness constraints.
Assignment sample_assignment(const AttributeSchema& schema, Rng& rng);

// Index of a template realizing the assignment's template-bound attributes,
// uniformly among candidates.
std::size_t pick_template(std::span<const PromptTemplate> templates, const Assignment& assignment, Rng& rng);

// Tokens of a template under an assignment; {seq} slots take seq.
std::vector<Token> render_tokens(const Task& task, const PromptTemplate& tmpl, const Assignment& assignment,
                                 std::span<const Token> seq = {});

TaskPrompt sample_prompt(const Task& task, std::span<const PromptTemplate> templates, Rng& rng);
TaskPrompt sample_prompt(const Task& task, Split split, Rng& rng);

CounterfactualPair sample_counterfactual(const Task& task, std::span<const PromptTemplate> templates,
                                         const TaskPrompt& prompt, const std::string& attribute, Rng& rng);

// Replaces every {seq} slot with the given words.
PromptTemplate instantiate_seq(const PromptTemplate& tmpl, std::span<const std::string> seq_words);

// Template text helpers so callers can inspect tasks without a tokenizer.
std::string detokenize_words(std::span<const std::string> words);

// --- concrete tasks -----------------------------------------------------------

TaskDefinition build_ioi_task(const std::vector<std::string>& names);

// Induction task skeleton whose templates still carry {seq}.
TaskDefinition build_induction_skeleton(const std::vector<std::string>& feature_pool,
                                        const std::vector<std::string>& filler, int seq_length);

// Instantiates {seq} with the given sequences: train_seqs feed the train
// templates, test_seqs the test templates.
TaskDefinition build_induction_task(const TaskDefinition& skeleton,
                                    const std::vector<std::vector<std::string>>& train_seqs,
                                    const std::vector<std::vector<std::string>>& test_seqs);

// --- induction sequence sampling ---------------------------------------------

struct InductionSamplerConfig {
  double threshold = 1.0;  // τ, nats
  int prefix_length = 10;  // n
  int probe_count = 5;     // m
  int max_iterations = 10000;
};

struct InductionSample {
  std::vector<Token> prefix;
  std::vector<Token> probes;
  double mean_cross_entropy = 0.0;
  int iterations = 0;
};

// Mean over probes t of −log softmax(model(r + t + r))[t] at the final position.
double induction_score(const Model& model, std::span<const Token> prefix, std::span<const Token> probes);

// Draws prefixes until the mean probe cross-entropy is ≤ threshold. Throws
// Error("sampling_failed") naming the best mean cross-entropy seen when the
// iteration cap is hit.
InductionSample sample_induction_sequence(const Model& model, std::span<const Token> pool,
                                          const InductionSamplerConfig& config, Rng& rng);

// --- JSON ---------------------------------------------------------------------

std::string task_to_json(const TaskDefinition& def);
TaskDefinition task_from_json(const std::string& text);

}  // namespace sage
