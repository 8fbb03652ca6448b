#include "sage/harness/config.hpp"

#include "sage/error.hpp"
#include "sage/harness/manifest.hpp"
#include "sage/json_ids.hpp"

namespace sage {

using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t get_seed(const json& j) {
  return j.is_string() ? std::stoull(j.get<std::string>()) : j.get<std::uint64_t>();
}

BudgetMode mode_from_string(const std::string& s) {
  if (s == "per-node") return BudgetMode::PerNode;
  if (s == "shared") return BudgetMode::Shared;
  throw Error("invalid_config", "unknown budget mode: " + s);
}

template <class T>
void read(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  if constexpr (std::is_same_v<T, double>) {
    if (j.at(key).is_string()) {
      dst = parse_double(j.at(key).get<std::string>());
      return;
    }
  }
  dst = j.at(key).get<T>();
}

}  // namespace

Seeds derive_seeds(std::uint64_t seed) {
  Seeds s;
  std::uint64_t* slots[] = {&s.task, &s.model, &s.shuffle, &s.sampler, &s.sae, &s.discover, &s.dictionary, &s.evaluation};
  std::uint64_t x = seed;
  for (auto* p : slots) *p = x = splitmix(x);
  return s;
}

RunConfig RunConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  if (j.contains("seed")) c.seed = get_seed(j.at("seed"));
  c.seeds = derive_seeds(c.seed);

  if (j.contains("task")) {
    const auto& t = j.at("task");
    read(t, "kind", c.task.kind);
    read(t, "path", c.task.path);
    read(t, "feature_pool", c.task.feature_pool);
    read(t, "filler", c.task.filler);
    read(t, "seq_length", c.task.seq_length);
    if (!c.task.path.empty() && c.task.path.front() != '/' && !base_dir.empty())
      c.task.path = (base_dir / c.task.path).string();
  }
  if (j.contains("model")) c.model = config_from_json(j.at("model"));

  if (j.contains("training")) {
    const auto& t = j.at("training");
    auto& tr = c.training.train;
    read(t, "epochs", tr.epochs);
    read(t, "batch_size", tr.batch_size);
    read(t, "learning_rate", tr.adam.learning_rate);
    read(t, "warmup_steps", tr.adam.warmup_steps);
    read(t, "min_lr_fraction", tr.adam.min_lr_fraction);
    read(t, "target_accuracy", tr.target_accuracy);
    read(t, "require_target", tr.require_target);
    read(t, "stop_at_target", tr.stop_at_target);
    read(t, "task_examples", c.training.task_examples);
    read(t, "heldout", c.training.heldout);
    read(t, "induction_task_examples", c.training.induction.task_examples);
    read(t, "induction_repeat_examples", c.training.induction.repeat_examples);
    read(t, "min_prefix", c.training.induction.min_prefix);
    read(t, "max_prefix", c.training.induction.max_prefix);
  }
  if (j.contains("sampler")) {
    const auto& t = j.at("sampler");
    read(t, "threshold", c.sampler.sampler.threshold);
    read(t, "probe_count", c.sampler.sampler.probe_count);
    read(t, "max_iterations", c.sampler.sampler.max_iterations);
    read(t, "train_seqs", c.sampler.train_seqs);
    read(t, "test_seqs", c.sampler.test_seqs);
  }
  if (j.contains("sae")) {
    const auto& t = j.at("sae");
    read(t, "layer", c.sae.layer);
    read(t, "latent_dim", c.sae.sae.latent_dim);
    read(t, "l1_coef", c.sae.sae.l1_coef);
    read(t, "epochs", c.sae.sae.epochs);
    read(t, "batch_size", c.sae.sae.batch_size);
    read(t, "learning_rate", c.sae.sae.learning_rate);
    read(t, "prompts", c.sae.prompts);
    read(t, "random_fraction", c.sae.random_fraction);
  }
  if (j.contains("attribution")) {
    const auto& t = j.at("attribution");
    if (t.contains("estimator")) c.attribution.attribution.estimator = estimator_from_string(t.at("estimator"));
    read(t, "ig_steps", c.attribution.attribution.ig_steps);
    read(t, "pairs", c.attribution.pairs);
    read(t, "top_n", c.attribution.top_n);
    read(t, "drop_ratio", c.attribution.drop_ratio);
    read(t, "filter_prompts", c.attribution.filter_prompts);
    read(t, "mean_prompts", c.attribution.mean_prompts);
    read(t, "include_mlp", c.attribution.include_mlp);
    read(t, "include_embed", c.attribution.include_embed);
    if (t.contains("first_position") && !t.at("first_position").is_null())
      c.attribution.first_position = t.at("first_position").get<int>();
  }
  if (j.contains("dictionary")) read(j.at("dictionary"), "prompts", c.dictionary.prompts);
  if (j.contains("evaluation")) {
    const auto& t = j.at("evaluation");
    read(t, "prompts", c.evaluation.prompts);
    read(t, "budgets", c.evaluation.budgets);
    if (t.contains("modes")) {
      c.evaluation.modes.clear();
      for (const auto& m : t.at("modes")) c.evaluation.modes.push_back(mode_from_string(m.get<std::string>()));
    }
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    auto rd = [&](const char* k, std::uint64_t& dst) {
      if (s.contains(k)) dst = get_seed(s.at(k));
    };
    rd("task", c.seeds.task);
    rd("model", c.seeds.model);
    rd("shuffle", c.seeds.shuffle);
    rd("sampler", c.seeds.sampler);
    rd("sae", c.seeds.sae);
    rd("discover", c.seeds.discover);
    rd("dictionary", c.seeds.dictionary);
    rd("evaluation", c.seeds.evaluation);
  }
  c.model.seed = c.seeds.model;
  c.training.train.shuffle_seed = c.seeds.shuffle;
  c.sae.sae.seed = c.seeds.sae;
  c.sampler.sampler.prefix_length = c.task.seq_length;

  require(c.task.kind == "induction" || c.task.kind == "ioi" || c.task.kind == "file", "invalid_config",
          "task.kind must be induction, ioi or file");
  require(c.task.kind != "file" || !c.task.path.empty(), "invalid_config", "task.kind = file needs task.path");
  require(c.attribution.drop_ratio >= 0.0, "invalid_config", "drop_ratio must be >= 0");
  require(c.sae.random_fraction >= 0.0 && c.sae.random_fraction <= 1.0, "invalid_config",
          "sae.random_fraction must lie in [0, 1]");
  require(!c.evaluation.modes.empty(), "invalid_config", "evaluation.modes must not be empty");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_json(json::parse(read_text(path)), path.parent_path());
}

json RunConfig::to_json() const {
  auto seed_str = [](std::uint64_t s) { return std::to_string(s); };
  json modes = json::array();
  for (auto m : evaluation.modes) modes.push_back(sage::to_string(m));
  json j;
  j["seed"] = seed_str(seed);
  j["task"] = {{"kind", task.kind},
               {"path", task.path},
               {"feature_pool", task.feature_pool},
               {"filler", task.filler},
               {"seq_length", task.seq_length}};
  j["model"] = config_to_json(model);
  j["training"] = {{"epochs", training.train.epochs},
                   {"batch_size", training.train.batch_size},
                   {"learning_rate", format_double(training.train.adam.learning_rate)},
                   {"warmup_steps", training.train.adam.warmup_steps},
                   {"min_lr_fraction", format_double(training.train.adam.min_lr_fraction)},
                   {"target_accuracy", format_double(training.train.target_accuracy)},
                   {"require_target", training.train.require_target},
                   {"stop_at_target", training.train.stop_at_target},
                   {"task_examples", training.task_examples},
                   {"heldout", training.heldout},
                   {"induction_task_examples", training.induction.task_examples},
                   {"induction_repeat_examples", training.induction.repeat_examples},
                   {"min_prefix", training.induction.min_prefix},
                   {"max_prefix", training.induction.max_prefix}};
  j["sampler"] = {{"threshold", format_double(sampler.sampler.threshold)},
                  {"probe_count", sampler.sampler.probe_count},
                  {"max_iterations", sampler.sampler.max_iterations},
                  {"train_seqs", sampler.train_seqs},
                  {"test_seqs", sampler.test_seqs}};
  j["sae"] = {{"layer", sae.layer},
              {"latent_dim", sae.sae.latent_dim},
              {"l1_coef", format_double(sae.sae.l1_coef)},
              {"epochs", sae.sae.epochs},
              {"batch_size", sae.sae.batch_size},
              {"learning_rate", format_double(sae.sae.learning_rate)},
              {"prompts", sae.prompts},
              {"random_fraction", format_double(sae.random_fraction)}};
  j["attribution"] = {{"estimator", sage::to_string(attribution.attribution.estimator)},
                      {"ig_steps", attribution.attribution.ig_steps},
                      {"pairs", attribution.pairs},
                      {"top_n", attribution.top_n},
                      {"drop_ratio", format_double(attribution.drop_ratio)},
                      {"filter_prompts", attribution.filter_prompts},
                      {"mean_prompts", attribution.mean_prompts},
                      {"include_mlp", attribution.include_mlp},
                      {"include_embed", attribution.include_embed},
                      {"first_position", attribution.first_position ? json(*attribution.first_position) : json()}};
  j["dictionary"] = {{"prompts", dictionary.prompts}};
  j["evaluation"] = {{"prompts", evaluation.prompts}, {"budgets", evaluation.budgets}, {"modes", modes}};
  j["seeds"] = {{"task", seed_str(seeds.task)},           {"model", seed_str(seeds.model)},
                {"shuffle", seed_str(seeds.shuffle)},     {"sampler", seed_str(seeds.sampler)},
                {"sae", seed_str(seeds.sae)},             {"discover", seed_str(seeds.discover)},
                {"dictionary", seed_str(seeds.dictionary)}, {"evaluation", seed_str(seeds.evaluation)}};
  return j;
}

RunConfig default_induction_config(std::uint64_t seed) {
  json j;
  j["seed"] = seed;
  j["task"] = {{"kind", "induction"},
               {"feature_pool", {"cat", "dog", "fox", "owl", "bee", "cow", "pig", "rat", "elk", "yak"}},
               {"filler", {"red",  "blue", "green", "gold", "gray", "pink", "tall", "short", "warm", "cold",
                           "soft", "hard", "fast", "slow", "old",  "new",  "big",  "small", "dark", "light",
                           "one",  "two",  "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                           "sun",  "moon", "star", "rain", "snow", "wind", "tree", "rock", "lake", "hill"}},
               {"seq_length", 10}};
  j["model"] = {{"n_layers", 2}, {"n_heads", 4}, {"d_model", 64}, {"d_head", 16}, {"d_mlp", 0}, {"max_seq", 64}};
  j["training"] = {{"epochs", 4},
                   {"learning_rate", 5e-3},
                   {"induction_task_examples", 2000},
                   {"induction_repeat_examples", 12000}};
  j["sae"] = {{"l1_coef", 2.0}, {"epochs", 8}};
  return RunConfig::from_json(j);
}

}  // namespace sage
