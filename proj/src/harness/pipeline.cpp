#include "sage/harness/pipeline.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "sage/error.hpp"
#include "sage/harness/manifest.hpp"
#include "sage/harness/report.hpp"
#include "sage/harness/tensor_io.hpp"
#include "sage/json_ids.hpp"
#include "sage/parallel.hpp"

namespace sage {

namespace fs = std::filesystem;
using nlohmann::json;

// --- helpers --------------------------------------------------------------------

int last_attribute_position(const TaskDefinition& task) {
  int last = -1;
  for (const auto* list : {&task.train_templates, &task.test_templates}) {
    for (const auto& t : *list) {
      // Token positions: {seq} slots expand to seq_length tokens.
      int pos = 0;
      for (const auto& p : t.parts) {
        if (p.slot && p.text == kSeqSlot) {
          pos += task.seq_length;
          continue;
        }
        if (p.slot) last = std::max(last, pos);
        ++pos;
      }
    }
  }
  require(last >= 0, "invalid_task", "task templates have no attribute slots");
  return last;
}

std::vector<TaskPrompt> sample_prompts(const Task& task, Split split, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TaskPrompt> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_prompt(task, split, rng));
  return out;
}

std::vector<CounterfactualPair> sample_pairs(const Task& task, Split split, const std::string& attribute,
                                             std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const auto templates = task.templates(split);
  std::vector<CounterfactualPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto p = sample_prompt(task, templates, rng);
    out.push_back(sample_counterfactual(task, templates, p, attribute, rng));
  }
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<std::vector<Token>> tokens_of(std::span<const TaskPrompt> prompts) {
  std::vector<std::vector<Token>> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(p.tokens);
  return out;
}

int sae_layer(const RunConfig& config, const ModelConfig& mc) {
  const int l = config.sae.layer < 0 ? mc.n_layers - 1 : config.sae.layer;
  require(l >= 0 && l < mc.n_layers, "invalid_config", "sae.layer out of range");
  return l;
}

void round_values(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

void round_to_float(SparseAutoencoder& sae) {
  round_values(sae.w_enc.data());
  round_values(sae.b_enc);
  round_values(sae.w_dec.data());
  round_values(sae.b_dec);
}

void round_to_float(MeanStore& means) {
  auto& m = means.means;
  round_values(m.embed.data());
  for (auto& x : m.head_out) round_values(x.data());
  for (auto& x : m.mlp_out) round_values(x.data());
  for (auto& x : m.resid_post) round_values(x.data());
  round_values(m.logits.data());
}

void round_to_float(SupervisedFeatureDictionary& dict) {
  round_values(dict.mean);
  for (auto& [k, v] : dict.features) round_values(v);
}

// --- stages -----------------------------------------------------------------------

TaskDefinition stage_task_gen(const RunConfig& config) {
  const auto& t = config.task;
  if (t.kind == "induction") return build_induction_skeleton(t.feature_pool, t.filler, t.seq_length);
  if (t.kind == "ioi") return build_ioi_task(t.feature_pool);
  return task_from_json(read_text(t.path));
}

ModelArtifact stage_model_train(const RunConfig& config, const TaskDefinition& def) {
  const Task task(def);
  ModelConfig mc = config.model;
  mc.vocab_size = static_cast<int>(task.tokenizer().size());
  Rng rng(config.seeds.task);
  std::vector<Example> data, heldout;
  if (def.has_seq_placeholder()) {
    data = make_induction_training_data(task, config.training.induction, rng);
    InductionDataConfig hc = config.training.induction;
    hc.task_examples = config.training.heldout;
    hc.repeat_examples = 0;
    heldout = make_induction_training_data(task, hc, rng);
  } else {
    data = make_task_examples(task, Split::Train, config.training.task_examples, rng);
    heldout = make_task_examples(task, def.test_templates.empty() ? Split::Train : Split::Test,
                                 config.training.heldout, rng);
  }
  std::size_t longest = 0;
  for (const auto& e : data) longest = std::max(longest, e.tokens.size());
  for (const auto& e : heldout) longest = std::max(longest, e.tokens.size());
  mc.max_seq = std::max(mc.max_seq, static_cast<int>(longest));

  auto trained = train_model(mc, data, heldout, config.training.train);
  ModelArtifact out;
  out.weights = std::move(trained.weights);
  out.report = std::move(trained.report);
  const Model model(out.weights);

  if (def.has_seq_placeholder()) {
    Rng srng(config.seeds.sampler);
    const auto pool = task.filler_tokens();
    std::vector<std::vector<std::string>> train_seqs, test_seqs;
    for (int i = 0; i < config.sampler.train_seqs + config.sampler.test_seqs; ++i) {
      auto s = sample_induction_sequence(model, pool, config.sampler.sampler, srng);
      std::vector<std::string> words;
      for (Token t : s.prefix) words.push_back(task.tokenizer().word(t));
      (i < config.sampler.train_seqs ? train_seqs : test_seqs).push_back(std::move(words));
      out.samples.push_back(std::move(s));
    }
    out.task = build_induction_task(def, train_seqs, test_seqs);
  } else {
    out.task = def;
  }
  const Task inst(out.task);
  const Split eval_split = out.task.test_templates.empty() ? Split::Train : Split::Test;
  const auto prompts = sample_prompts(inst, eval_split, config.training.heldout, mix(config.seeds.task, 1));
  out.task_accuracy = eval_accuracy(model, prompts);
  if (config.training.train.require_target && out.task_accuracy < config.training.train.target_accuracy) {
    TrainReport r = out.report;
    r.accuracy = out.task_accuracy;
    throw TrainingError("accuracy on the instantiated task is " + std::to_string(out.task_accuracy), r);
  }
  return out;
}

SaeArtifact stage_sae_train(const RunConfig& config, const ModelArtifact& m) {
  const Task task(m.task);
  const Model model(m.weights);
  const int layer = sae_layer(config, m.weights.config);
  const std::size_t n_random =
      static_cast<std::size_t>(std::llround(config.sae.random_fraction * static_cast<double>(config.sae.prompts)));
  const std::size_t n_task = config.sae.prompts - n_random;
  auto seqs = tokens_of(sample_prompts(task, Split::Train, n_task, mix(config.seeds.sae, 1)));
  std::vector<Token> words;
  for (std::size_t t = 0; t < task.tokenizer().size(); ++t)
    if (!Tokenizer::is_punctuation(task.tokenizer().word(static_cast<Token>(t)))) words.push_back(static_cast<Token>(t));
  const std::size_t T = seqs.empty() ? static_cast<std::size_t>(last_attribute_position(m.task) + 2) : seqs.front().size();
  Rng rng(mix(config.seeds.sae, 2));
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  for (std::size_t i = 0; i < n_random; ++i) {
    std::vector<Token> s(T);
    for (auto& t : s) t = words[pick(rng)];
    seqs.push_back(std::move(s));
  }
  const Matrix acts = collect_residual_activations_all(model, seqs, layer);
  SaeConfig sc = config.sae.sae;
  require(sc.latent_dim > m.weights.config.d_model, "invalid_config", "SAE latent dim must exceed d_model");
  auto r = train_sae(acts, sc);
  SaeArtifact out{std::move(r.sae), std::move(r.report)};
  out.sae.layer = layer;
  round_to_float(out.sae);
  return out;
}

DiscoverArtifact stage_discover(const RunConfig& config, const ModelArtifact& m) {
  const Task task(m.task);
  const Model model(m.weights);
  const auto& ac = config.attribution;
  DiscoverArtifact out;

  const auto mean_prompts = sample_prompts(task, Split::Train, ac.mean_prompts, mix(config.seeds.discover, 1));
  out.means = MeanStore::compute(model, tokens_of(mean_prompts));
  round_to_float(out.means);
  const int T = out.means.means.seq_len;

  EdgeInventoryOptions opt;
  opt.first_position = ac.first_position.value_or(last_attribute_position(m.task));
  opt.include_mlp = ac.include_mlp;
  opt.include_embed = ac.include_embed;
  const auto edges = edge_inventory(m.weights.config, T, opt);
  require(!edges.empty(), "invalid_config", "edge inventory is empty");

  std::uint64_t salt = 10;
  for (const auto& attr : task.schema().attributes) {
    ++salt;
    if (attr.values.size() < 2) continue;
    const auto pairs = sample_pairs(task, Split::Train, attr.name, ac.pairs, mix(config.seeds.discover, salt));
    auto table = average_attributions(model, pairs, edges, ac.attribution);
    auto formed = form_groups(table, ac.top_n);
    if (formed.all_zero) out.flags.push_back("all_zero:" + attr.name);
    for (auto& g : formed.groups) out.formed.push_back(std::move(g));
    out.tables.push_back(std::move(table));
  }
  const auto filter_prompts = sample_prompts(task, Split::Train, ac.filter_prompts, mix(config.seeds.discover, 2));
  out.filtered = filter_groups(model, out.formed, filter_prompts, out.means, ac.drop_ratio);
  return out;
}

DictionaryMap stage_fit_dict(const RunConfig& config, const ModelArtifact& m, const DiscoverArtifact& d) {
  const Task task(m.task);
  const Model model(m.weights);
  std::vector<NodeId> nodes;
  {
    std::set<NodeId> seen;
    for (const auto& g : d.filtered.kept)
      for (const auto& n : g.upstream_nodes())
        if (seen.insert(n).second) nodes.push_back(n);
  }
  DictionaryMap out;
  if (nodes.empty()) return out;
  const auto prompts = sample_prompts(task, Split::Train, config.dictionary.prompts, config.seeds.dictionary);
  const auto d_model = static_cast<std::size_t>(m.weights.config.d_model);
  std::vector<Matrix> acts(nodes.size(), Matrix(prompts.size(), d_model));
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto run = model.forward(prompts[i].tokens);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const auto a = run.cache.at(nodes[k]);
      std::copy(a.begin(), a.end(), acts[k].row(i).begin());
    }
  });
  std::vector<Assignment> assignments;
  for (const auto& p : prompts) assignments.push_back(p.assignment);
  std::vector<SupervisedFeatureDictionary> fitted(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) {
    fitted[k] = fit_supervised(nodes[k], acts[k], assignments, task.schema());
    round_to_float(fitted[k]);
  });
  for (auto& f : fitted) out.emplace(f.node, std::move(f));
  return out;
}

namespace {

bool sae_covers(const SaeArtifact* sae, const CrossSectionGroup& g) {
  if (!sae) return false;
  for (const auto& n : g.upstream_nodes())
    if (n.layer > sae->sae.layer && n.kind != NodeKind::Embed) return false;
  return true;
}

Split eval_split(const TaskDefinition& t) { return t.test_templates.empty() ? Split::Train : Split::Test; }

}  // namespace

std::vector<Test1Score> stage_eval_test1(const RunConfig& config, const ModelArtifact& m, const DiscoverArtifact& d,
                                         const DictionaryMap& dicts, const SaeArtifact* sae) {
  const Task task(m.task);
  const Model model(m.weights);
  const auto prompts = sample_prompts(task, eval_split(m.task), config.evaluation.prompts, mix(config.seeds.evaluation, 1));
  std::vector<Test1Score> out;
  for (const auto& g : d.filtered.kept) {
    out.push_back(test1(model, g, "identity", prompts, d.means, identity_reconstructor()));
    out.push_back(test1(model, g, "mean", prompts, d.means, mean_reconstructor(d.means)));
    out.push_back(test1(model, g, "supervised", prompts, d.means, supervised_reconstructor(dicts, prompts, true)));
    out.push_back(test1(model, g, "supervised-unweighted", prompts, d.means,
                        supervised_reconstructor(dicts, prompts, false)));
    if (sae_covers(sae, g)) out.push_back(test1(model, g, "sae", prompts, d.means, sae_reconstructor(sae->sae)));
  }
  return out;
}

std::vector<EditOutcome> stage_eval_test2(const RunConfig& config, const ModelArtifact& m, const DiscoverArtifact& d,
                                          const DictionaryMap& dicts, const SaeArtifact* sae) {
  const Task task(m.task);
  const Model model(m.weights);
  const auto& budgets = config.evaluation.budgets;
  std::vector<EditOutcome> out;
  std::uint64_t salt = 100;
  std::map<std::string, std::vector<CounterfactualPair>> pairs;
  for (const auto& a : task.schema().attributes) {
    ++salt;
    if (a.values.size() >= 2)
      pairs[a.name] = sample_pairs(task, eval_split(m.task), a.name, config.evaluation.prompts,
                                   mix(config.seeds.evaluation, salt));
  }
  auto append = [&out](std::vector<EditOutcome> v) {
    for (auto& o : v) out.push_back(std::move(o));
  };
  for (const auto& g : d.filtered.kept) {
    const auto& p = pairs.at(g.attribute);
    append(test2_run(model, g, "ground-truth", p, budgets, ground_truth_editor()));
    append(test2_run(model, g, "supervised", p, budgets, supervised_editor(dicts)));
    if (sae_covers(sae, g))
      for (auto mode : config.evaluation.modes) append(test2_run(model, g, "sae", p, budgets, sae_editor(sae->sae, mode), mode));
  }
  return out;
}

PipelineResult run_pipeline(const RunConfig& config) {
  PipelineResult r;
  r.skeleton = stage_task_gen(config);
  r.model = stage_model_train(config, r.skeleton);
  r.sae = stage_sae_train(config, r.model);
  r.discover = stage_discover(config, r.model);
  r.dicts = stage_fit_dict(config, r.model, r.discover);
  r.eval.test1 = stage_eval_test1(config, r.model, r.discover, r.dicts, &r.sae);
  r.eval.test2 = stage_eval_test2(config, r.model, r.discover, r.dicts, &r.sae);
  r.report_csv = report_csv(report_rows(r.discover.filtered.kept, r.eval.test1, r.eval.test2));
  return r;
}

// --- persistence ------------------------------------------------------------------

void save_model_artifact(const fs::path& dir, const ModelArtifact& m) {
  std::vector<NamedTensor> tensors;
  m.weights.for_each_tensor([&](const std::string& name, const std::vector<double>& data,
                                const std::vector<std::uint32_t>& dims) {
    tensors.push_back({name, make_tensor(dims, data)});
  });
  save_archive(dir / "weights.sgt", tensors);
  json samples = json::array();
  for (const auto& s : m.samples)
    samples.push_back({{"prefix", s.prefix},
                       {"probes", s.probes},
                       {"mean_cross_entropy", format_double(s.mean_cross_entropy)},
                       {"iterations", s.iterations}});
  json losses = json::array();
  for (double l : m.report.loss_curve) losses.push_back(format_double(l));
  json j = {{"config", config_to_json(m.weights.config)},
            {"report",
             {{"accuracy", format_double(m.report.accuracy)},
              {"loss_curve", losses},
              {"epochs", m.report.epochs},
              {"steps", m.report.steps}}},
            {"task_accuracy", format_double(m.task_accuracy)},
            {"samples", samples}};
  write_text(dir / "model.json", j.dump(1) + "\n");
  write_text(dir / "task.json", task_to_json(m.task) + "\n");
}

ModelArtifact load_model_artifact(const fs::path& dir) {
  const json j = json::parse(read_text(dir / "model.json"));
  ModelArtifact m;
  m.weights = ModelWeights::zeros(config_from_json(j.at("config")));
  const auto tensors = load_archive(dir / "weights.sgt");
  std::size_t i = 0;
  m.weights.for_each_tensor([&](const std::string& name, std::vector<double>& data,
                                const std::vector<std::uint32_t>& dims) {
    require(i < tensors.size() && tensors[i].name == name && tensors[i].tensor.dims == dims, "stage_mismatch",
            "weights archive does not match the model config at " + name);
    data = tensors[i].tensor.as_double();
    ++i;
  });
  require(i == tensors.size(), "stage_mismatch", "weights archive has extra tensors");
  const auto& r = j.at("report");
  m.report.accuracy = parse_double(r.at("accuracy"));
  for (const auto& l : r.at("loss_curve")) m.report.loss_curve.push_back(parse_double(l));
  m.report.epochs = r.at("epochs");
  m.report.steps = r.at("steps");
  m.task_accuracy = parse_double(j.at("task_accuracy"));
  for (const auto& s : j.at("samples"))
    m.samples.push_back({s.at("prefix").get<std::vector<Token>>(), s.at("probes").get<std::vector<Token>>(),
                         parse_double(s.at("mean_cross_entropy")), s.at("iterations").get<int>()});
  m.task = task_from_json(read_text(dir / "task.json"));
  return m;
}

void save_sae_artifact(const fs::path& dir, const SaeArtifact& s) {
  const auto& a = s.sae;
  using U = std::uint32_t;
  save_archive(dir / "sae.sgt", {{"w_enc", make_tensor({U(a.w_enc.rows()), U(a.w_enc.cols())}, a.w_enc.data())},
                                 {"b_enc", make_tensor({U(a.b_enc.size())}, a.b_enc)},
                                 {"w_dec", make_tensor({U(a.w_dec.rows()), U(a.w_dec.cols())}, a.w_dec.data())},
                                 {"b_dec", make_tensor({U(a.b_dec.size())}, a.b_dec)}});
  json losses = json::array();
  for (double l : s.report.epoch_loss) losses.push_back(format_double(l));
  json j = {{"layer", a.layer},
            {"report",
             {{"epoch_loss", losses},
              {"reconstruction_mse", format_double(s.report.reconstruction_mse)},
              {"mean_l0", format_double(s.report.mean_l0)},
              {"dead_fraction", format_double(s.report.dead_fraction)}}}};
  write_text(dir / "sae.json", j.dump(1) + "\n");
}

SaeArtifact load_sae_artifact(const fs::path& dir) {
  const json j = json::parse(read_text(dir / "sae.json"));
  const auto t = load_archive(dir / "sae.sgt");
  require(t.size() == 4 && t[0].name == "w_enc" && t[1].name == "b_enc" && t[2].name == "w_dec" && t[3].name == "b_dec",
          "stage_mismatch", "unexpected SAE archive layout");
  auto mat = [](const Tensor& x) {
    require(x.dims.size() == 2, "stage_mismatch", "SAE matrix is not rank 2");
    return Matrix(x.dims[0], x.dims[1], x.as_double());
  };
  SaeArtifact s;
  s.sae.w_enc = mat(t[0].tensor);
  s.sae.b_enc = t[1].tensor.as_double();
  s.sae.w_dec = mat(t[2].tensor);
  s.sae.b_dec = t[3].tensor.as_double();
  s.sae.layer = j.at("layer");
  const auto& r = j.at("report");
  for (const auto& l : r.at("epoch_loss")) s.report.epoch_loss.push_back(parse_double(l));
  s.report.reconstruction_mse = parse_double(r.at("reconstruction_mse"));
  s.report.mean_l0 = parse_double(r.at("mean_l0"));
  s.report.dead_fraction = parse_double(r.at("dead_fraction"));
  return s;
}

namespace {

std::vector<std::pair<std::string, Matrix*>> node_tensor_slots(NodeTensors& n) {
  std::vector<std::pair<std::string, Matrix*>> out{{"embed", &n.embed}};
  for (std::size_t i = 0; i < n.head_out.size(); ++i) out.push_back({"head_out." + std::to_string(i), &n.head_out[i]});
  for (std::size_t i = 0; i < n.mlp_out.size(); ++i) out.push_back({"mlp_out." + std::to_string(i), &n.mlp_out[i]});
  for (std::size_t i = 0; i < n.resid_post.size(); ++i)
    out.push_back({"resid_post." + std::to_string(i), &n.resid_post[i]});
  out.push_back({"logits", &n.logits});
  return out;
}

}  // namespace

void save_discover_artifact(const fs::path& dir, const DiscoverArtifact& d) {
  NodeTensors copy = d.means.means;
  std::vector<NamedTensor> tensors;
  for (auto& [name, m] : node_tensor_slots(copy))
    tensors.push_back({name, make_tensor({std::uint32_t(m->rows()), std::uint32_t(m->cols())}, m->data())});
  save_archive(dir / "means.sgt", tensors);
  json tables = json::array();
  for (const auto& t : d.tables) tables.push_back(json::parse(edge_table_to_json(t)));
  write_text(dir / "scores.json", tables.dump(1) + "\n");
  write_text(dir / "groups_formed.json", groups_to_json(d.formed) + "\n");
  write_text(dir / "groups.json", groups_to_json(d.filtered.kept) + "\n");
  write_text(dir / "groups_dropped.json", groups_to_json(d.filtered.dropped) + "\n");
  json j = {{"mean_count", d.means.count},
            {"seq_len", d.means.means.seq_len},
            {"mean_effect", format_double(d.filtered.mean_effect)},
            {"flags", d.flags}};
  write_text(dir / "discover.json", j.dump(1) + "\n");
}

DiscoverArtifact load_discover_artifact(const fs::path& dir, const ModelConfig& config) {
  const json j = json::parse(read_text(dir / "discover.json"));
  DiscoverArtifact d;
  d.means.count = j.at("mean_count");
  d.means.means = NodeTensors::zeros(config, j.at("seq_len").get<int>());
  const auto tensors = load_archive(dir / "means.sgt");
  auto slots = node_tensor_slots(d.means.means);
  require(tensors.size() == slots.size(), "stage_mismatch", "mean archive does not match the model config");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    require(tensors[i].name == slots[i].first && tensors[i].tensor.element_count() == slots[i].second->data().size(),
            "stage_mismatch", "mean archive does not match the model config at " + slots[i].first);
    slots[i].second->data() = tensors[i].tensor.as_double();
  }
  for (const auto& t : json::parse(read_text(dir / "scores.json"))) d.tables.push_back(edge_table_from_json(t.dump()));
  d.formed = groups_from_json(read_text(dir / "groups_formed.json"));
  d.filtered.kept = groups_from_json(read_text(dir / "groups.json"));
  d.filtered.dropped = groups_from_json(read_text(dir / "groups_dropped.json"));
  d.filtered.mean_effect = parse_double(j.at("mean_effect"));
  d.flags = j.at("flags").get<std::vector<std::string>>();
  return d;
}

void save_dictionaries(const fs::path& dir, const DictionaryMap& dicts) {
  std::vector<NamedTensor> tensors;
  json index = json::array();
  for (const auto& [node, dict] : dicts) {
    const std::string base = to_string(node);
    const auto d = static_cast<std::uint32_t>(dict.mean.size());
    tensors.push_back({base + "/mean", make_tensor({d}, dict.mean)});
    json keys = json::array();
    for (const auto& [key, vec] : dict.features) {
      tensors.push_back({base + "/" + key.first + "=" + key.second, make_tensor({d}, vec)});
      keys.push_back({key.first, key.second});
    }
    index.push_back({{"node", node_to_json(node)}, {"residual_mse", format_double(dict.residual_mse)}, {"features", keys}});
  }
  save_archive(dir / "dictionaries.sgt", tensors);
  write_text(dir / "dictionaries.json", index.dump(1) + "\n");
}

DictionaryMap load_dictionaries(const fs::path& dir) {
  const json index = json::parse(read_text(dir / "dictionaries.json"));
  const auto tensors = load_archive(dir / "dictionaries.sgt");
  DictionaryMap out;
  std::size_t t = 0;
  auto next = [&](const std::string& name) {
    require(t < tensors.size() && tensors[t].name == name, "stage_mismatch", "dictionary archive mismatch at " + name);
    return tensors[t++].tensor.as_double();
  };
  for (const auto& e : index) {
    SupervisedFeatureDictionary d;
    d.node = node_from_json(e.at("node"));
    d.residual_mse = parse_double(e.at("residual_mse"));
    const std::string base = to_string(d.node);
    d.mean = next(base + "/mean");
    for (const auto& k : e.at("features")) {
      const auto a = k.at(0).get<std::string>(), v = k.at(1).get<std::string>();
      d.features[{a, v}] = next(base + "/" + a + "=" + v);
    }
    out.emplace(d.node, std::move(d));
  }
  require(t == tensors.size(), "stage_mismatch", "dictionary archive has extra tensors");
  return out;
}

}  // namespace sage
