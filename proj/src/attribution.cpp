#include "sage/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sage/error.hpp"
#include "sage/json_ids.hpp"
#include "sage/parallel.hpp"

namespace sage {

using nlohmann::json;

// --- means --------------------------------------------------------------------

MeanStore MeanStore::compute(const Model& model, std::span<const std::vector<Token>> prompts) {
  require(!prompts.empty(), "invalid_argument", "mean store needs at least one prompt");
  const std::size_t T = prompts.front().size();
  for (const auto& p : prompts)
    require(p.size() == T, "invalid_argument", "mean store prompts must share one length");

  const auto chunks = fixed_chunks(prompts.size());
  std::vector<NodeTensors> partial(chunks.size());
  auto tensors = [](NodeTensors& n) {
    std::vector<std::vector<double>*> out{&n.embed.data()};
    for (auto& m : n.head_out) out.push_back(&m.data());
    for (auto& m : n.mlp_out) out.push_back(&m.data());
    for (auto& m : n.resid_post) out.push_back(&m.data());
    out.push_back(&n.logits.data());
    return out;
  };
  parallel_for(chunks.size(), [&](std::size_t c) {
    partial[c] = NodeTensors::zeros(model.config(), static_cast<int>(T));
    auto dst = tensors(partial[c]);
    for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
      auto run = model.forward(prompts[i]);
      auto src = tensors(run.cache);
      for (std::size_t t = 0; t < dst.size(); ++t)
        for (std::size_t j = 0; j < dst[t]->size(); ++j) (*dst[t])[j] += (*src[t])[j];
    }
  });
  MeanStore store;
  store.count = prompts.size();
  store.means = NodeTensors::zeros(model.config(), static_cast<int>(T));
  auto dst = tensors(store.means);
  for (auto& p : partial) {
    auto src = tensors(p);
    for (std::size_t t = 0; t < dst.size(); ++t)
      for (std::size_t j = 0; j < dst[t]->size(); ++j) (*dst[t])[j] += (*src[t])[j];
  }
  const double inv = 1.0 / static_cast<double>(prompts.size());
  for (auto* t : dst)
    for (double& v : *t) v *= inv;
  return store;
}

Vector MeanStore::mean(const NodeId& node) const {
  require(contains(node), "missing_mean", "no mean activation for node " + to_string(node));
  const auto s = means.at(node);
  return {s.begin(), s.end()};
}

// --- inventory ----------------------------------------------------------------

std::vector<EdgeId> edge_inventory(const ModelConfig& config, int seq_len, const EdgeInventoryOptions& opt) {
  require(seq_len >= 1, "invalid_argument", "sequence length must be >= 1");
  std::vector<NodeId> writers;  // position filled below
  if (opt.include_embed) writers.push_back(NodeId::embed(0));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) writers.push_back(NodeId::head_out(l, h, 0));
    if (opt.include_mlp && config.d_mlp > 0) writers.push_back(NodeId::mlp_out(l, 0));
  }
  std::vector<ReadPoint> reads;
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) {
      reads.push_back({ReadKind::AttnQ, l, h});
      reads.push_back({ReadKind::AttnK, l, h});
      reads.push_back({ReadKind::AttnV, l, h});
    }
    if (opt.include_mlp && config.d_mlp > 0) reads.push_back({ReadKind::MlpIn, l, 0});
  }
  reads.push_back({ReadKind::LogitsIn, 0, 0});

  std::vector<EdgeId> out;
  const int first = std::max(0, opt.first_position);
  for (const auto& w : writers) {
    for (const auto& r : reads) {
      if (write_stage(w) >= read_stage(r, config.n_layers)) continue;
      for (int q = first; q < seq_len; ++q) {
        const bool kv = r.kind == ReadKind::AttnK || r.kind == ReadKind::AttnV;
        for (int p = kv ? 0 : q; p <= q; ++p) {
          NodeId up = w;
          up.position = p;
          out.push_back({up, r, q});
        }
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- estimators ---------------------------------------------------------------

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::Basic: return "basic";
    case Estimator::Integrated: return "integrated";
    case Estimator::CleanCorrupt: return "clean_corrupt";
  }
  return "?";
}

Estimator estimator_from_string(const std::string& s) {
  for (auto e : {Estimator::Basic, Estimator::Integrated, Estimator::CleanCorrupt})
    if (to_string(e) == s) return e;
  throw Error("invalid_config", "unknown estimator: " + s);
}

namespace {

void check_pair(const CounterfactualPair& pair) {
  require(pair.clean.tokens.size() == pair.corrupt.tokens.size(), "length_mismatch",
          "clean and corrupt prompts differ in length");
}

Vector node_delta(const ForwardResult& clean, const ForwardResult& corrupt, const NodeId& node) {
  return sub(corrupt.cache.at(node), clean.cache.at(node));
}

}  // namespace

std::vector<double> attribution_basic(const Model& model, const CounterfactualPair& pair, const Metric& metric,
                                      std::span<const EdgeId> edges) {
  check_pair(pair);
  const auto clean = model.forward(pair.clean.tokens);
  const auto corrupt = model.forward(pair.corrupt.tokens);
  const auto grads = model.backward(clean, metric);
  std::vector<double> out(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i)
    out[i] = dot(node_delta(clean, corrupt, edges[i].upstream), model.read_gradient(grads, edges[i]));
  return out;
}

std::vector<double> attribution_clean_corrupt(const Model& model, const CounterfactualPair& pair,
                                              const Metric& metric, std::span<const EdgeId> edges) {
  check_pair(pair);
  const auto clean = model.forward(pair.clean.tokens);
  const auto corrupt = model.forward(pair.corrupt.tokens);
  const auto g_clean = model.backward(clean, metric);
  const auto g_corrupt = model.backward(corrupt, metric);
  std::vector<double> out(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const Vector a = model.read_gradient(g_clean, edges[i]);
    const Vector b = model.read_gradient(g_corrupt, edges[i]);
    const Vector delta = node_delta(clean, corrupt, edges[i].upstream);
    double s = 0.0;
    for (std::size_t j = 0; j < delta.size(); ++j) s += delta[j] * (0.5 * a[j] + 0.5 * b[j]);
    out[i] = s;
  }
  return out;
}

std::vector<double> attribution_integrated(const Model& model, const CounterfactualPair& pair,
                                           const Metric& metric, std::span<const EdgeId> edges, int steps) {
  check_pair(pair);
  require(steps >= 1, "invalid_argument", "integrated gradients need steps >= 1");
  const auto clean = model.forward(pair.clean.tokens);
  const auto corrupt = model.forward(pair.corrupt.tokens);
  std::vector<Vector> delta(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) delta[i] = node_delta(clean, corrupt, edges[i].upstream);

  std::vector<Vector> grad_sum(edges.size(), Vector(static_cast<std::size_t>(model.config().d_model), 0.0));
  for (int k = 1; k <= steps; ++k) {
    const double alpha = static_cast<double>(k) / steps;
    Interventions iv;
    iv.edges.reserve(edges.size());
    for (std::size_t i = 0; i < edges.size(); ++i) {
      Vector r(clean.cache.at(edges[i].upstream).begin(), clean.cache.at(edges[i].upstream).end());
      axpy(alpha, delta[i], r);
      iv.edges.push_back({edges[i], std::move(r)});
    }
    const auto run = model.run(pair.clean.tokens, iv);
    const auto grads = model.backward(run, metric);
    for (std::size_t i = 0; i < edges.size(); ++i) axpy(1.0, model.read_gradient(grads, edges[i]), grad_sum[i]);
  }
  std::vector<double> out(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) out[i] = dot(delta[i], grad_sum[i]) / steps;
  return out;
}

double patching_effect(const Model& model, const CounterfactualPair& pair, const Metric& metric,
                       const EdgeId& edge) {
  check_pair(pair);
  const auto clean = model.forward(pair.clean.tokens);
  const auto corrupt = model.forward(pair.corrupt.tokens);
  const auto c = corrupt.cache.at(edge.upstream);
  const EdgePatch patch{edge, Vector(c.begin(), c.end())};
  const auto patched = model.run_with_edge_patch(pair.clean.tokens, std::span(&patch, 1));
  return metric.value(patched.logits()) - metric.value(clean.logits());
}

EdgeScoreTable average_attributions(const Model& model, std::span<const CounterfactualPair> pairs,
                                    std::span<const EdgeId> edges, const AttributionConfig& config) {
  require(!pairs.empty(), "invalid_argument", "attribution needs at least one pair");
  const std::string attr = pairs.front().varied_attribute;
  for (const auto& p : pairs)
    require(p.varied_attribute == attr, "mixed_attributes", "pairs vary different attributes");

  std::vector<std::vector<double>> per_pair(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const Metric metric = Metric::logit_diff(p.clean.target, p.clean.contrast);
    switch (config.estimator) {
      case Estimator::Basic: per_pair[i] = attribution_basic(model, p, metric, edges); break;
      case Estimator::CleanCorrupt: per_pair[i] = attribution_clean_corrupt(model, p, metric, edges); break;
      case Estimator::Integrated:
        per_pair[i] = attribution_integrated(model, p, metric, edges, config.ig_steps);
        break;
    }
  });

  EdgeScoreTable table;
  table.attribute = attr;
  table.estimator = to_string(config.estimator);
  table.pair_count = pairs.size();
  table.scores.resize(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    double s = 0.0;
    for (const auto& v : per_pair) s += v[e];
    s /= static_cast<double>(pairs.size());
    require(std::isfinite(s), "non_finite", "attribution score is not finite for " + to_string(edges[e]));
    table.scores[e] = {edges[e], s};
  }
  return table;
}

// --- groups -------------------------------------------------------------------

std::string to_string(Sign s) { return s == Sign::Positive ? "positive" : "negative"; }

std::vector<NodeId> CrossSectionGroup::upstream_nodes() const {
  std::vector<NodeId> out;
  std::set<NodeId> seen;
  const std::size_t n = std::min(selected_subset_size == 0 ? edges.size() : selected_subset_size, edges.size());
  for (std::size_t i = 0; i < n; ++i)
    if (seen.insert(edges[i].upstream).second) out.push_back(edges[i].upstream);
  return out;
}

GroupFormation form_groups(const EdgeScoreTable& table, std::size_t top_n) {
  require(top_n >= 1, "invalid_argument", "top-n must be >= 1");
  std::vector<EdgeScore> ranked;
  for (const auto& s : table.scores)
    if (s.score != 0.0) ranked.push_back(s);
  GroupFormation out;
  if (ranked.empty()) {
    out.all_zero = true;
    return out;
  }
  std::sort(ranked.begin(), ranked.end(), [](const EdgeScore& a, const EdgeScore& b) {
    const double fa = std::fabs(a.score), fb = std::fabs(b.score);
    if (fa != fb) return fa > fb;
    return a.edge < b.edge;
  });
  if (ranked.size() > top_n) ranked.resize(top_n);
  CrossSectionGroup pos{table.attribute, Sign::Positive, {}, {}, 0, 0.0};
  CrossSectionGroup neg{table.attribute, Sign::Negative, {}, {}, 0, 0.0};
  for (const auto& s : ranked) {
    auto& g = s.score > 0.0 ? pos : neg;
    g.edges.push_back(s.edge);
    g.scores.push_back(s.score);
  }
  for (auto* g : {&pos, &neg}) {
    g->selected_subset_size = g->edges.size();
    if (!g->edges.empty()) out.groups.push_back(std::move(*g));
  }
  return out;
}

Matrix edge_mean_ablation(const Model& model, std::span<const Token> tokens, std::span<const EdgeId> edges,
                          const MeanStore& means) {
  std::vector<EdgePatch> patches;
  patches.reserve(edges.size());
  for (const auto& e : edges) patches.push_back({e, means.mean(e.upstream)});
  return model.run_with_edge_patch(tokens, patches).logits();
}

std::vector<std::size_t> subset_ladder(std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t s = 1; s < n; s *= 2) out.push_back(s);
  if (n > 0) out.push_back(n);
  return out;
}

FilterResult filter_groups(const Model& model, std::vector<CrossSectionGroup> groups,
                           std::span<const TaskPrompt> prompts, const MeanStore& means, double drop_ratio) {
  require(drop_ratio >= 0.0, "invalid_argument", "drop ratio must be >= 0");
  require(!prompts.empty(), "invalid_argument", "filtering needs prompts");
  std::vector<double> clean(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    clean[i] = logit_diff(model.forward(prompts[i].tokens).logits(), prompts[i].target, prompts[i].contrast);
  });

  for (auto& g : groups) {
    double best = -1.0;
    std::size_t best_size = 0;
    for (std::size_t size : subset_ladder(g.edges.size())) {
      const std::span<const EdgeId> subset(g.edges.data(), size);
      std::vector<double> change(prompts.size());
      parallel_for(prompts.size(), [&](std::size_t i) {
        const auto logits = edge_mean_ablation(model, prompts[i].tokens, subset, means);
        change[i] = logit_diff(logits, prompts[i].target, prompts[i].contrast) - clean[i];
      });
      double mean = 0.0;
      for (double c : change) mean += c;
      const double effect = std::fabs(mean / static_cast<double>(prompts.size()));
      if (effect > best) {
        best = effect;
        best_size = size;
      }
    }
    g.selected_subset_size = best_size;
    g.max_effect = std::max(best, 0.0);
  }

  FilterResult out;
  if (groups.empty()) return out;
  for (const auto& g : groups) out.mean_effect += g.max_effect;
  out.mean_effect /= static_cast<double>(groups.size());
  for (auto& g : groups) {
    if (g.max_effect < drop_ratio * out.mean_effect) {
      out.dropped.push_back(std::move(g));
    } else {
      out.kept.push_back(std::move(g));
    }
  }
  return out;
}

// --- JSON ---------------------------------------------------------------------

std::string edge_table_to_json(const EdgeScoreTable& t) {
  json j;
  j["attribute"] = t.attribute;
  j["metric"] = t.metric;
  j["estimator"] = t.estimator;
  j["pair_count"] = t.pair_count;
  j["scores"] = json::array();
  for (const auto& s : t.scores) {
    json e = edge_to_json(s.edge);
    e["score"] = format_double(s.score);
    j["scores"].push_back(std::move(e));
  }
  return j.dump(1);
}

EdgeScoreTable edge_table_from_json(const std::string& text) {
  const json j = json::parse(text);
  EdgeScoreTable t;
  t.attribute = j.at("attribute").get<std::string>();
  t.metric = j.value("metric", "logit_diff");
  t.estimator = j.value("estimator", "");
  t.pair_count = j.at("pair_count").get<std::size_t>();
  for (const auto& e : j.at("scores")) t.scores.push_back({edge_from_json(e), parse_double(e.at("score"))});
  return t;
}

std::string groups_to_json(std::span<const CrossSectionGroup> groups) {
  json arr = json::array();
  for (const auto& g : groups) {
    json j;
    j["id"] = g.id();
    j["attribute"] = g.attribute;
    j["sign"] = to_string(g.sign);
    j["selected_subset_size"] = g.selected_subset_size;
    j["max_effect"] = format_double(g.max_effect);
    j["edges"] = json::array();
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
      json e = edge_to_json(g.edges[i]);
      e["score"] = format_double(g.scores[i]);
      j["edges"].push_back(std::move(e));
    }
    arr.push_back(std::move(j));
  }
  return arr.dump(1);
}

std::vector<CrossSectionGroup> groups_from_json(const std::string& text) {
  std::vector<CrossSectionGroup> out;
  for (const auto& j : json::parse(text)) {
    CrossSectionGroup g;
    g.attribute = j.at("attribute").get<std::string>();
    const auto sign = j.at("sign").get<std::string>();
    require(sign == "positive" || sign == "negative", "invalid_json", "unknown group sign: " + sign);
    g.sign = sign == "positive" ? Sign::Positive : Sign::Negative;
    g.selected_subset_size = j.at("selected_subset_size").get<std::size_t>();
    g.max_effect = parse_double(j.at("max_effect"));
    for (const auto& e : j.at("edges")) {
      g.edges.push_back(edge_from_json(e));
      g.scores.push_back(parse_double(e.at("score")));
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace sage
