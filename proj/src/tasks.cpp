#include "sage/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <set>

#include <json.hpp>

#include "sage/error.hpp"

namespace sage {

using nlohmann::json;

// --- schema -------------------------------------------------------------------

void AttributeSchema::validate() const {
  std::set<std::string> names;
  for (const auto& a : attributes) {
    require(!a.name.empty(), "invalid_task", "attribute with empty name");
    require(names.insert(a.name).second, "invalid_task", "duplicate attribute name: " + a.name);
    require(!a.values.empty(), "invalid_task", "attribute has no values: " + a.name);
    std::set<std::string> vals(a.values.begin(), a.values.end());
    require(vals.size() == a.values.size(), "invalid_task", "duplicate value in attribute: " + a.name);
  }
  for (const auto& [x, y] : distinct) {
    require(has(x) && has(y), "invalid_task", "distinct constraint names unknown attribute");
  }
}

bool AttributeSchema::has(const std::string& name) const {
  return std::any_of(attributes.begin(), attributes.end(), [&](const Attribute& a) { return a.name == name; });
}

const Attribute& AttributeSchema::at(const std::string& name) const {
  for (const auto& a : attributes)
    if (a.name == name) return a;
  throw Error("invalid_attribute", "unknown attribute: " + name);
}

std::size_t AttributeSchema::total_values() const {
  std::size_t n = 0;
  for (const auto& a : attributes) n += a.values.size();
  return n;
}

// --- tokenizer ----------------------------------------------------------------

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : words_(std::move(vocabulary)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    require(!words_[i].empty(), "invalid_vocabulary", "empty vocabulary entry");
    require(split_words(words_[i]).size() == 1, "invalid_vocabulary",
            "vocabulary entry is not a single word: '" + words_[i] + "'");
    require(ids_.emplace(words_[i], static_cast<Token>(i)).second, "invalid_vocabulary",
            "duplicate vocabulary entry: " + words_[i]);
  }
}

Token Tokenizer::id(const std::string& word) const {
  auto it = ids_.find(word);
  require(it != ids_.end(), "unknown_word", "word not in vocabulary: '" + word + "'");
  return it->second;
}

const std::string& Tokenizer::word(Token t) const {
  require(t >= 0 && static_cast<std::size_t>(t) < words_.size(), "invalid_input", "token out of vocabulary");
  return words_[static_cast<std::size_t>(t)];
}

bool Tokenizer::is_punctuation(std::string_view word) {
  return word.size() == 1 && std::string_view(",.!?;:").find(word[0]) != std::string_view::npos;
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (ch == '{') {
      flush();
      const auto close = text.find('}', i);
      require(close != std::string_view::npos, "invalid_template", "unterminated slot in template");
      out.emplace_back(text.substr(i, close - i + 1));
      i = close;
    } else if (is_punctuation(std::string_view(&ch, 1))) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

std::vector<Token> Tokenizer::tokenize(std::string_view text) const {
  std::vector<Token> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string detokenize_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0 && !Tokenizer::is_punctuation(words[i])) out.push_back(' ');
    out += words[i];
  }
  return out;
}

std::string Tokenizer::detokenize(std::span<const Token> tokens) const {
  std::vector<std::string> words;
  words.reserve(tokens.size());
  for (Token t : tokens) words.push_back(word(t));
  return detokenize_words(words);
}

// --- templates ----------------------------------------------------------------

PromptTemplate PromptTemplate::parse(std::string family, Assignment binds, std::string text) {
  PromptTemplate t;
  t.family = std::move(family);
  t.binds = std::move(binds);
  t.text = std::move(text);
  for (auto& w : Tokenizer::split_words(t.text)) {
    if (w.size() >= 2 && w.front() == '{' && w.back() == '}') {
      t.parts.push_back({true, w.substr(1, w.size() - 2)});
    } else {
      t.parts.push_back({false, std::move(w)});
    }
  }
  return t;
}

std::size_t PromptTemplate::slot_count(const std::string& name) const {
  return static_cast<std::size_t>(
      std::count_if(parts.begin(), parts.end(), [&](const TemplatePart& p) { return p.slot && p.text == name; }));
}

std::vector<int> PromptTemplate::slot_positions(const std::string& name) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].slot && parts[i].text == name) out.push_back(static_cast<int>(i));
  return out;
}

PromptTemplate instantiate_seq(const PromptTemplate& tmpl, std::span<const std::string> seq_words) {
  PromptTemplate out;
  out.family = tmpl.family;
  out.binds = tmpl.binds;
  for (const auto& p : tmpl.parts) {
    if (p.slot && p.text == kSeqSlot) {
      for (const auto& w : seq_words) out.parts.push_back({false, w});
    } else {
      out.parts.push_back(p);
    }
  }
  std::vector<std::string> words;
  for (const auto& p : out.parts) words.push_back(p.slot ? "{" + p.text + "}" : p.text);
  out.text = detokenize_words(words);
  return out;
}

// --- task definition ----------------------------------------------------------

bool TaskDefinition::has_seq_placeholder() const {
  auto any = [](const std::vector<PromptTemplate>& ts) {
    return std::any_of(ts.begin(), ts.end(), [](const PromptTemplate& t) { return t.slot_count(kSeqSlot) > 0; });
  };
  return any(train_templates) || any(test_templates);
}

void TaskDefinition::validate() const {
  schema.validate();
  require(!train_templates.empty(), "invalid_task", "task has no train templates");
  require(schema.has(target_attribute) && schema.has(contrast_attribute), "invalid_task",
          "target/contrast attribute missing from schema");
  for (const auto* list : {&train_templates, &test_templates}) {
    for (const auto& t : *list) {
      for (const auto& p : t.parts) {
        if (!p.slot) continue;
        require(p.text == kSeqSlot || schema.has(p.text), "invalid_task",
                "template slot {" + p.text + "} has no schema attribute");
      }
      for (const auto& [name, value] : t.binds) {
        const auto& a = schema.at(name);
        require(std::find(a.values.begin(), a.values.end(), value) != a.values.end(), "invalid_task",
                "template binds unknown value " + value + " for " + name);
      }
      for (const auto& a : schema.attributes) {
        const bool slot = t.slot_count(a.name) > 0;
        const bool bound = t.binds.contains(a.name);
        require(slot != bound, "invalid_task",
                "attribute " + a.name + " must be either a slot or bound in template '" + t.text + "'");
      }
      require(t.slot_count(target_attribute) > 0 && t.slot_count(contrast_attribute) > 0, "invalid_task",
              "target and contrast attributes must be template slots");
    }
  }
  for (const auto& a : schema.attributes) {
    const bool is_slot = train_templates.front().slot_count(a.name) > 0;
    if (!is_slot) continue;
    for (const auto& v : a.values) {
      require(Tokenizer::split_words(v).size() == 1, "invalid_task",
              "attribute value is not a single token: '" + v + "'");
    }
  }
}

Task::Task(TaskDefinition def) : def_(std::move(def)), tokenizer_(def_.vocabulary) {
  def_.validate();
  for (const auto* list : {&def_.train_templates, &def_.test_templates}) {
    for (const auto& t : *list)
      for (const auto& p : t.parts)
        if (!p.slot) tokenizer_.id(p.text);
  }
  for (const auto& a : def_.schema.attributes) {
    if (def_.train_templates.front().slot_count(a.name) == 0) continue;
    for (const auto& v : a.values) tokenizer_.id(v);
  }
  for (const auto& w : def_.filler) tokenizer_.id(w);
}

std::span<const PromptTemplate> Task::templates(Split split) const {
  return split == Split::Train ? std::span<const PromptTemplate>(def_.train_templates)
                               : std::span<const PromptTemplate>(def_.test_templates);
}

std::vector<Token> Task::filler_tokens() const {
  std::vector<Token> out;
  for (const auto& w : def_.filler) out.push_back(tokenizer_.id(w));
  return out;
}

TaskPrompt render_prompt(const Task& task, std::span<const PromptTemplate> templates, std::size_t template_index,
                         const Assignment& assignment) {
  require(template_index < templates.size(), "invalid_argument", "template index out of range");
  const auto& tmpl = templates[template_index];
  const auto& tok = task.tokenizer();
  TaskPrompt p;
  p.assignment = assignment;
  p.template_index = template_index;
  for (const auto& part : tmpl.parts) {
    if (!part.slot) {
      p.tokens.push_back(tok.id(part.text));
      continue;
    }
    require(part.text != kSeqSlot, "invalid_task", "template still contains an uninstantiated {seq}");
    auto it = assignment.find(part.text);
    require(it != assignment.end(), "invalid_argument", "assignment misses attribute " + part.text);
    p.tokens.push_back(tok.id(it->second));
  }
  for (const auto& [name, value] : tmpl.binds) {
    auto it = assignment.find(name);
    require(it != assignment.end() && it->second == value, "invalid_argument",
            "assignment does not match template binding for " + name);
  }
  const auto& def = task.definition();
  p.target = tok.id(assignment.at(def.target_attribute));
  p.contrast = tok.id(assignment.at(def.contrast_attribute));
  return p;
}

namespace {

std::size_t uniform_index(std::size_t n, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

bool satisfies_distinct(const AttributeSchema& schema, const Assignment& a) {
  for (const auto& [x, y] : schema.distinct) {
    auto ix = a.find(x), iy = a.find(y);
    if (ix != a.end() && iy != a.end() && ix->second == iy->second) return false;
  }
  return true;
}

bool binds_match(const PromptTemplate& t, const Assignment& a) {
  for (const auto& [name, value] : t.binds) {
    auto it = a.find(name);
    if (it == a.end() || it->second != value) return false;
  }
  return true;
}

}  // namespace

Assignment sample_assignment(const AttributeSchema& schema, Rng& rng) {
  Assignment a;
  for (int attempt = 0;; ++attempt) {
    require(attempt < 100000, "sampling_failed", "no assignment satisfies the distinctness constraints");
    a.clear();
    for (const auto& attr : schema.attributes) a[attr.name] = attr.values[uniform_index(attr.values.size(), rng)];
    if (satisfies_distinct(schema, a)) return a;
  }
}

std::size_t pick_template(std::span<const PromptTemplate> templates, const Assignment& assignment, Rng& rng) {
  require(!templates.empty(), "invalid_argument", "no templates to sample from");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < templates.size(); ++i)
    if (binds_match(templates[i], assignment)) candidates.push_back(i);
  require(!candidates.empty(), "invalid_task", "no template realizes the sampled template-bound attributes");
  return candidates[uniform_index(candidates.size(), rng)];
}

std::vector<Token> render_tokens(const Task& task, const PromptTemplate& tmpl, const Assignment& assignment,
                                 std::span<const Token> seq) {
  const auto& tok = task.tokenizer();
  std::vector<Token> out;
  for (const auto& part : tmpl.parts) {
    if (!part.slot) {
      out.push_back(tok.id(part.text));
    } else if (part.text == kSeqSlot) {
      require(!seq.empty(), "invalid_task", "template contains {seq} but no sequence was given");
      out.insert(out.end(), seq.begin(), seq.end());
    } else {
      auto it = assignment.find(part.text);
      require(it != assignment.end(), "invalid_argument", "assignment misses attribute " + part.text);
      out.push_back(tok.id(it->second));
    }
  }
  return out;
}

TaskPrompt sample_prompt(const Task& task, std::span<const PromptTemplate> templates, Rng& rng) {
  require(!templates.empty(), "invalid_argument", "no templates to sample from");
  const Assignment a = sample_assignment(task.schema(), rng);
  return render_prompt(task, templates, pick_template(templates, a, rng), a);
}

TaskPrompt sample_prompt(const Task& task, Split split, Rng& rng) {
  return sample_prompt(task, task.templates(split), rng);
}

CounterfactualPair sample_counterfactual(const Task& task, std::span<const PromptTemplate> templates,
                                         const TaskPrompt& prompt, const std::string& attribute, Rng& rng) {
  const auto& schema = task.schema();
  const auto& attr = schema.at(attribute);
  require(attr.values.size() >= 2, "invalid_argument", "attribute " + attribute + " has a single value");
  const std::string& old_value = prompt.assignment.at(attribute);
  std::vector<std::string> options;
  for (const auto& v : attr.values) {
    if (v == old_value) continue;
    Assignment trial = prompt.assignment;
    trial[attribute] = v;
    if (satisfies_distinct(schema, trial)) options.push_back(v);
  }
  require(!options.empty(), "sampling_failed", "no admissible counterfactual value for " + attribute);
  Assignment corrupt = prompt.assignment;
  corrupt[attribute] = options[uniform_index(options.size(), rng)];

  std::size_t tidx = prompt.template_index;
  const auto& clean_t = templates[prompt.template_index];
  if (clean_t.binds.contains(attribute)) {
    bool found = false;
    for (std::size_t i = 0; i < templates.size() && !found; ++i) {
      const auto& t = templates[i];
      if (t.family != clean_t.family) continue;
      if (binds_match(t, corrupt)) {
        tidx = i;
        found = true;
      }
    }
    require(found, "invalid_task", "no template in family " + clean_t.family + " realizes " + attribute + "=" +
                                       corrupt[attribute]);
  }
  CounterfactualPair pair;
  pair.clean = prompt;
  pair.corrupt = render_prompt(task, templates, tidx, corrupt);
  pair.varied_attribute = attribute;
  return pair;
}

// --- concrete tasks -----------------------------------------------------------

namespace {

void add_words(std::vector<std::string>& vocab, std::set<std::string>& seen, const std::vector<std::string>& words) {
  for (const auto& w : words)
    if (seen.insert(w).second) vocab.push_back(w);
}

void add_template_words(std::vector<std::string>& vocab, std::set<std::string>& seen,
                        const std::vector<PromptTemplate>& templates) {
  for (const auto& t : templates)
    for (const auto& p : t.parts)
      if (!p.slot && seen.insert(p.text).second) vocab.push_back(p.text);
}

void check_single_tokens(const std::vector<std::string>& words, const char* what) {
  for (const auto& w : words) {
    require(Tokenizer::split_words(w).size() == 1 && !Tokenizer::is_punctuation(w), "invalid_task",
            std::string(what) + " is not a single token: '" + w + "'");
  }
}

}  // namespace

TaskDefinition build_ioi_task(const std::vector<std::string>& names) {
  check_single_tokens(names, "name");
  require(names.size() >= 2, "invalid_task", "IOI needs at least two names");
  TaskDefinition def;
  def.name = "ioi";
  def.schema.attributes = {{"io", names}, {"subject", names}, {"order", {"abb", "bab"}}};
  def.schema.distinct = {{"io", "subject"}};
  def.target_attribute = "io";
  def.contrast_attribute = "subject";
  auto both = [](const std::string& family, const std::string& middle, std::vector<PromptTemplate>& out) {
    out.push_back(PromptTemplate::parse(family, {{"order", "abb"}}, "Then, {io} and {subject} " + middle));
    out.push_back(PromptTemplate::parse(family, {{"order", "bab"}}, "Then, {subject} and {io} " + middle));
  };
  both("drink", "had a long argument. {subject} gave a drink to", def.train_templates);
  both("apple", "went to the store. {subject} gave an apple to", def.train_templates);
  both("cake", "went to the cafe. {subject} gave the cake to", def.test_templates);
  std::set<std::string> seen;
  add_words(def.vocabulary, seen, names);
  add_template_words(def.vocabulary, seen, def.train_templates);
  add_template_words(def.vocabulary, seen, def.test_templates);
  def.filler = def.vocabulary;
  def.validate();
  return def;
}

TaskDefinition build_induction_skeleton(const std::vector<std::string>& feature_pool,
                                        const std::vector<std::string>& filler, int seq_length) {
  check_single_tokens(feature_pool, "feature value");
  check_single_tokens(filler, "filler word");
  require(feature_pool.size() >= 2, "invalid_task", "induction needs at least two feature values");
  require(seq_length >= 1, "invalid_task", "seq_length must be >= 1");
  TaskDefinition def;
  def.name = "induction";
  def.schema.attributes = {{"ind1", feature_pool}, {"ind2", feature_pool}, {"order", {"2121", "1122"}}};
  def.schema.distinct = {{"ind1", "ind2"}};
  def.target_attribute = "ind2";
  def.contrast_attribute = "ind1";
  def.seq_length = seq_length;
  const auto t1 = PromptTemplate::parse("seq", {{"order", "2121"}},
                                        "{seq} {ind2},{ind1},{ind2},{ind1} {seq} {ind2},{ind1},");
  const auto t2 = PromptTemplate::parse("seq", {{"order", "1122"}},
                                        "{seq} {ind1},{ind1},{ind2},{ind2} {seq} {ind1},{ind1},");
  def.train_templates = {t1, t2};
  def.test_templates = {t1, t2};
  std::set<std::string> seen;
  add_words(def.vocabulary, seen, feature_pool);
  add_template_words(def.vocabulary, seen, def.train_templates);
  for (const auto& w : filler) {
    require(!seen.contains(w), "invalid_task", "filler word overlaps feature pool or template: " + w);
  }
  add_words(def.vocabulary, seen, filler);
  def.filler = filler;
  def.validate();
  return def;
}

TaskDefinition build_induction_task(const TaskDefinition& skeleton,
                                    const std::vector<std::vector<std::string>>& train_seqs,
                                    const std::vector<std::vector<std::string>>& test_seqs) {
  require(!train_seqs.empty(), "invalid_task", "need at least one training sequence");
  TaskDefinition def = skeleton;
  def.train_templates.clear();
  def.test_templates.clear();
  auto expand = [](const std::vector<PromptTemplate>& base, const std::vector<std::vector<std::string>>& seqs,
                   const std::string& prefix, std::vector<PromptTemplate>& out) {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      for (const auto& t : base) {
        PromptTemplate inst = instantiate_seq(t, seqs[i]);
        inst.family = prefix + std::to_string(i);
        out.push_back(std::move(inst));
      }
    }
  };
  expand(skeleton.train_templates, train_seqs, "train", def.train_templates);
  expand(skeleton.test_templates, test_seqs, "test", def.test_templates);
  def.validate();
  return def;
}

// --- induction sampling -------------------------------------------------------

double induction_score(const Model& model, std::span<const Token> prefix, std::span<const Token> probes) {
  require(!probes.empty(), "invalid_argument", "induction_score: no probe tokens");
  double total = 0.0;
  std::vector<Token> x;
  for (Token t : probes) {
    x.assign(prefix.begin(), prefix.end());
    x.push_back(t);
    x.insert(x.end(), prefix.begin(), prefix.end());
    const auto run = model.forward(x);
    const auto last = run.logits().row(run.logits().rows() - 1);
    total += cross_entropy(last, static_cast<std::size_t>(t));
  }
  return total / static_cast<double>(probes.size());
}

InductionSample sample_induction_sequence(const Model& model, std::span<const Token> pool,
                                          const InductionSamplerConfig& config, Rng& rng) {
  require(!pool.empty(), "invalid_argument", "induction sampling needs a non-empty vocabulary pool");
  require(config.threshold >= 0.0, "invalid_argument", "threshold must be non-negative");
  require(config.prefix_length >= 1 && config.probe_count >= 1 && config.max_iterations >= 1, "invalid_argument",
          "prefix length, probe count and iteration cap must be >= 1");
  double best = std::numeric_limits<double>::infinity();
  InductionSample s;
  for (int it = 1; it <= config.max_iterations; ++it) {
    s.prefix.resize(static_cast<std::size_t>(config.prefix_length));
    s.probes.resize(static_cast<std::size_t>(config.probe_count));
    for (auto& t : s.prefix) t = pool[uniform_index(pool.size(), rng)];
    for (auto& t : s.probes) t = pool[uniform_index(pool.size(), rng)];
    s.mean_cross_entropy = induction_score(model, s.prefix, s.probes);
    s.iterations = it;
    best = std::min(best, s.mean_cross_entropy);
    if (s.mean_cross_entropy <= config.threshold) return s;
  }
  throw Error("sampling_failed", "induction sampling hit the iteration cap of " +
                                     std::to_string(config.max_iterations) +
                                     "; best mean cross-entropy " + std::to_string(best));
}

// --- JSON ---------------------------------------------------------------------

namespace {

json templates_to_json(const std::vector<PromptTemplate>& ts) {
  json arr = json::array();
  for (const auto& t : ts) arr.push_back({{"family", t.family}, {"binds", t.binds}, {"text", t.text}});
  return arr;
}

std::vector<PromptTemplate> templates_from_json(const json& arr) {
  std::vector<PromptTemplate> out;
  for (const auto& j : arr) {
    out.push_back(PromptTemplate::parse(j.value("family", std::string("default")),
                                        j.value("binds", Assignment{}), j.at("text").get<std::string>()));
  }
  return out;
}

}  // namespace

std::string task_to_json(const TaskDefinition& def) {
  json j;
  j["name"] = def.name;
  json attrs = json::array();
  for (const auto& a : def.schema.attributes) attrs.push_back({{"name", a.name}, {"values", a.values}});
  j["attributes"] = attrs;
  json distinct = json::array();
  for (const auto& [x, y] : def.schema.distinct) distinct.push_back({x, y});
  j["distinct"] = distinct;
  j["target"] = def.target_attribute;
  j["contrast"] = def.contrast_attribute;
  j["vocabulary"] = def.vocabulary;
  j["filler"] = def.filler;
  j["seq_length"] = def.seq_length;
  j["templates"] = {{"train", templates_to_json(def.train_templates)},
                    {"test", templates_to_json(def.test_templates)}};
  return j.dump(2);
}

TaskDefinition task_from_json(const std::string& text) {
  TaskDefinition def;
  try {
    const json j = json::parse(text);
    def.name = j.value("name", std::string("task"));
    for (const auto& a : j.at("attributes")) {
      def.schema.attributes.push_back({a.at("name").get<std::string>(), a.at("values").get<std::vector<std::string>>()});
    }
    if (j.contains("distinct")) {
      for (const auto& p : j.at("distinct")) def.schema.distinct.emplace_back(p.at(0), p.at(1));
    }
    def.target_attribute = j.at("target").get<std::string>();
    def.contrast_attribute = j.at("contrast").get<std::string>();
    def.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    def.filler = j.value("filler", std::vector<std::string>{});
    def.seq_length = j.value("seq_length", 10);
    def.train_templates = templates_from_json(j.at("templates").at("train"));
    def.test_templates = templates_from_json(j.at("templates").value("test", json::array()));
  } catch (const json::exception& e) {
    throw Error("invalid_task", std::string("task JSON: ") + e.what());
  }
  def.validate();
  return def;
}

}  // namespace sage
