#include "sage/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>

#include "sage/error.hpp"
#include "sage/parallel.hpp"

namespace sage {

// --- Test 1 -------------------------------------------------------------------

Test1Score test1(const Model& model, const CrossSectionGroup& group, const std::string& method,
                 std::span<const TaskPrompt> prompts, const MeanStore& means, const Reconstructor& reconstruct) {
  require(!prompts.empty(), "invalid_argument", "Test 1 needs prompts");
  const auto nodes = group.upstream_nodes();
  require(!nodes.empty(), "invalid_argument", "group has no upstream nodes");
  std::vector<Vector> mean_vec;
  for (const auto& n : nodes) mean_vec.push_back(means.mean(n));

  struct Row {
    double c, s, n, m;
  };
  std::vector<Row> rows(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto& p = prompts[i];
    const auto clean = model.forward(p.tokens);
    Interventions suff, nec, base;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const auto a = clean.cache.at(nodes[k]);
      Vector r = reconstruct(i, nodes[k], clean);
      require(r.size() == a.size(), "invalid_argument", "reconstruction has wrong dimension");
      Vector removed(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) removed[j] = mean_vec[k][j] + (a[j] - r[j]);
      suff.nodes.push_back({nodes[k], std::move(r)});
      nec.nodes.push_back({nodes[k], std::move(removed)});
      base.nodes.push_back({nodes[k], mean_vec[k]});
    }
    auto ld = [&](const Interventions& iv) { return logit_diff(model.run(p.tokens, iv).logits(), p.target, p.contrast); };
    rows[i] = {logit_diff(clean.logits(), p.target, p.contrast), ld(suff), ld(nec), ld(base)};
  });

  Test1Score s;
  s.group = group.id();
  s.method = method;
  for (const auto& r : rows) {
    s.l_clean += r.c;
    s.l_sufficiency += r.s;
    s.l_necessity += r.n;
    s.l_mean += r.m;
  }
  const double inv = 1.0 / static_cast<double>(prompts.size());
  s.l_clean *= inv;
  s.l_sufficiency *= inv;
  s.l_necessity *= inv;
  s.l_mean *= inv;
  const double denom = std::fabs(s.l_clean - s.l_mean);
  if (denom < kDegenerateDenominator) {
    s.degenerate = true;
    s.sufficiency = s.necessity = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.sufficiency = std::fabs(s.l_sufficiency - s.l_mean) / denom;
  s.necessity = 1.0 - std::fabs(s.l_necessity - s.l_mean) / denom;
  return s;
}

Reconstructor identity_reconstructor() {
  return [](std::size_t, const NodeId& node, const ForwardResult& clean) {
    const auto a = clean.cache.at(node);
    return Vector(a.begin(), a.end());
  };
}

Reconstructor mean_reconstructor(const MeanStore& means) {
  return [&means](std::size_t, const NodeId& node, const ForwardResult&) { return means.mean(node); };
}

Reconstructor supervised_reconstructor(const std::map<NodeId, SupervisedFeatureDictionary>& dicts,
                                       std::span<const TaskPrompt> prompts, bool weighted) {
  return [&dicts, prompts, weighted](std::size_t i, const NodeId& node, const ForwardResult& clean) {
    auto it = dicts.find(node);
    require(it != dicts.end(), "missing_dictionary", "no dictionary for node " + to_string(node));
    return reconstruct_cross_section(it->second, clean.cache, prompts[i].assignment, weighted);
  };
}

Reconstructor sae_reconstructor(const SparseAutoencoder& sae) {
  return [&sae](std::size_t, const NodeId& node, const ForwardResult& clean) {
    return reconstruct_cross_section(sae, clean.cache, node);
  };
}

// --- edits --------------------------------------------------------------------

FeatureSet feature_set(const SparseAutoencoder& sae, const ProjectionResult& projection) {
  FeatureSet f;
  f.ids = projection.selected;
  f.coefficients = projection.coefficients;
  for (std::size_t id : projection.selected) f.directions.push_back(sae.feature(id));
  return f;
}

namespace {

void check_sets(const FeatureSet& s, const FeatureSet& t, std::span<const double> a_s, std::span<const double> a_t) {
  require(a_s.size() == a_t.size(), "invalid_argument", "source and target activations differ in dimension");
  for (const auto* f : {&s, &t}) {
    require(f->directions.size() == f->coefficients.size(), "invalid_argument",
            "feature set has mismatched coefficients");
    for (const auto& v : f->directions)
      require(v.size() == a_s.size(), "invalid_argument", "feature direction has wrong dimension");
  }
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// a_s minus removed source features (ascending) plus added target features
// (ascending). Every edit's final vector is formed this way so greedy and
// exhaustive results are comparable bit for bit.
Vector apply_swaps(const FeatureSet& s, const FeatureSet& t, std::span<const double> a_s,
                   std::vector<std::pair<std::size_t, std::size_t>> swaps) {
  std::vector<std::size_t> rem, add;
  for (auto [i, j] : swaps) {
    rem.push_back(i);
    add.push_back(j);
  }
  std::sort(rem.begin(), rem.end());
  std::sort(add.begin(), add.end());
  Vector out(a_s.begin(), a_s.end());
  for (std::size_t i : rem) axpy(-s.coefficients[i], s.directions[i], out);
  for (std::size_t j : add) axpy(t.coefficients[j], t.directions[j], out);
  return out;
}

// Greedy search state for one node. Candidate distances come from cached inner
// products; the near-best ones are confirmed with apply_swaps so that chosen
// edits and reported distances are exactly those of the canonical composition.
class GreedyState {
 public:
  GreedyState(const FeatureSet& s, const FeatureSet& t, std::span<const double> a_s, std::span<const double> a_t)
      : s_(s), t_(t), a_s_(a_s), a_t_(a_t), used_s_(s.directions.size(), 0), used_t_(t.directions.size(), 0) {
    check_sets(s, t, a_s, a_t);
    const std::size_t ns = s.directions.size(), nt = t.directions.size();
    norm_s_.resize(ns);
    norm_t_.resize(nt);
    for (std::size_t i = 0; i < ns; ++i) norm_s_[i] = dot(s.directions[i], s.directions[i]);
    for (std::size_t j = 0; j < nt; ++j) norm_t_[j] = dot(t.directions[j], t.directions[j]);
    cross_ = Matrix(ns, nt);
    for (std::size_t i = 0; i < ns; ++i)
      for (std::size_t j = 0; j < nt; ++j) cross_(i, j) = dot(s.directions[i], t.directions[j]);
    refresh(Vector(a_s.begin(), a_s.end()));
  }

  struct Proposal {
    std::size_t i, j;
    double distance;
  };

  double current() const { return current_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& swaps() const { return swaps_; }
  const std::vector<double>& trajectory() const { return trajectory_; }

  // Best swap strictly improving the distance, if any.
  std::optional<Proposal> propose() const {
    const std::size_t ns = s_.directions.size(), nt = t_.directions.size();
    std::vector<double> fast(ns * nt, std::numeric_limits<double>::infinity());
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ns; ++i) {
      if (used_s_[i]) continue;
      const double ci = s_.coefficients[i];
      for (std::size_t j = 0; j < nt; ++j) {
        if (used_t_[j]) continue;
        const double cj = t_.coefficients[j];
        const double d2 = ee_ + ci * ci * norm_s_[i] + cj * cj * norm_t_[j] - 2.0 * ci * es_[i] +
                          2.0 * cj * et_[j] - 2.0 * ci * cj * cross_(i, j);
        fast[i * nt + j] = d2;
        best = std::min(best, d2);
      }
    }
    if (!std::isfinite(best)) return std::nullopt;
    double scale = ee_ + 1.0;
    for (std::size_t i = 0; i < ns; ++i) scale = std::max(scale, s_.coefficients[i] * s_.coefficients[i] * norm_s_[i]);
    for (std::size_t j = 0; j < nt; ++j) scale = std::max(scale, t_.coefficients[j] * t_.coefficients[j] * norm_t_[j]);
    const double tol = 1e-9 * scale;
    std::optional<Proposal> out;
    double exact_best = current_;
    auto swaps = swaps_;
    swaps.emplace_back();
    for (std::size_t i = 0; i < ns; ++i) {
      for (std::size_t j = 0; j < nt; ++j) {
        if (!(fast[i * nt + j] <= best + tol)) continue;
        swaps.back() = {i, j};
        const double d = distance(apply_swaps(s_, t_, a_s_, swaps), a_t_);
        if (d < exact_best) {
          exact_best = d;
          out = Proposal{i, j, d};
        }
      }
    }
    return out;
  }

  void apply(const Proposal& p) {
    used_s_[p.i] = used_t_[p.j] = 1;
    swaps_.push_back({p.i, p.j});
    trajectory_.push_back(p.distance);
    refresh(apply_swaps(s_, t_, a_s_, swaps_));
  }

  SwapEdit result() const {
    SwapEdit e;
    e.swaps = swaps_;
    e.trajectory = trajectory_;
    e.edited = apply_swaps(s_, t_, a_s_, swaps_);
    e.distance = distance(e.edited, a_t_);
    return e;
  }

  // Edit made of the first n swaps.
  SwapEdit prefix(std::size_t n) const {
    SwapEdit e;
    n = std::min(n, swaps_.size());
    e.swaps.assign(swaps_.begin(), swaps_.begin() + static_cast<std::ptrdiff_t>(n));
    e.trajectory.assign(trajectory_.begin(), trajectory_.begin() + static_cast<std::ptrdiff_t>(n));
    e.edited = apply_swaps(s_, t_, a_s_, e.swaps);
    e.distance = distance(e.edited, a_t_);
    return e;
  }

 private:
  void refresh(const Vector& a) {
    Vector e = sub(a, a_t_);
    ee_ = dot(e, e);
    current_ = distance(a, a_t_);
    es_.resize(s_.directions.size());
    et_.resize(t_.directions.size());
    for (std::size_t i = 0; i < es_.size(); ++i) es_[i] = dot(e, s_.directions[i]);
    for (std::size_t j = 0; j < et_.size(); ++j) et_[j] = dot(e, t_.directions[j]);
  }

  const FeatureSet& s_;
  const FeatureSet& t_;
  std::span<const double> a_s_, a_t_;
  std::vector<char> used_s_, used_t_;
  Vector norm_s_, norm_t_, es_, et_;
  Matrix cross_;
  double ee_ = 0.0, current_ = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> swaps_;
  std::vector<double> trajectory_;
};

int max_budget(std::span<const int> budgets) {
  int k = 0;
  for (int b : budgets) {
    require(b >= 0, "invalid_argument", "edit budget must be >= 0");
    k = std::max(k, b);
  }
  return k;
}

}  // namespace

SwapEdit greedy_sae_edit(const FeatureSet& source, const FeatureSet& target, std::span<const double> a_s,
                         std::span<const double> a_t, int k) {
  const int budget[] = {k};
  return greedy_sae_edit_path(source, target, a_s, a_t, budget).front();
}

std::vector<SwapEdit> greedy_sae_edit_path(const FeatureSet& source, const FeatureSet& target,
                                           std::span<const double> a_s, std::span<const double> a_t,
                                           std::span<const int> budgets) {
  const int kmax = max_budget(budgets);
  GreedyState st(source, target, a_s, a_t);
  for (int round = 0; round < kmax; ++round) {
    auto p = st.propose();
    if (!p) break;
    st.apply(*p);
  }
  std::vector<SwapEdit> out;
  for (int b : budgets) out.push_back(st.prefix(static_cast<std::size_t>(b)));
  return out;
}

SwapEdit brute_force_edit(const FeatureSet& source, const FeatureSet& target, std::span<const double> a_s,
                          std::span<const double> a_t, int k) {
  check_sets(source, target, a_s, a_t);
  require(k >= 0 && k <= 2, "invalid_argument", "brute-force edit supports k <= 2");
  const std::size_t ns = source.directions.size(), nt = target.directions.size();
  require(ns <= kBruteForceCap && nt <= kBruteForceCap, "oracle_cap_exceeded",
          "brute-force edit is limited to " + std::to_string(kBruteForceCap) + " features per side");
  SwapEdit best;
  best.edited.assign(a_s.begin(), a_s.end());
  best.distance = distance(best.edited, a_t);
  auto consider = [&](std::vector<std::pair<std::size_t, std::size_t>> swaps) {
    Vector e = apply_swaps(source, target, a_s, swaps);
    const double d = distance(e, a_t);
    if (d < best.distance) {
      best.distance = d;
      best.edited = std::move(e);
      best.swaps = std::move(swaps);
    }
  };
  if (k >= 1)
    for (std::size_t i = 0; i < ns; ++i)
      for (std::size_t j = 0; j < nt; ++j) consider({{i, j}});
  if (k >= 2)
    for (std::size_t i1 = 0; i1 < ns; ++i1)
      for (std::size_t i2 = i1 + 1; i2 < ns; ++i2)
        for (std::size_t j1 = 0; j1 < nt; ++j1)
          for (std::size_t j2 = j1 + 1; j2 < nt; ++j2) consider({{i1, j1}, {i2, j2}});
  return best;
}

std::vector<std::vector<SwapEdit>> greedy_shared_edit_path(std::span<const FeatureSet> sources,
                                                           std::span<const FeatureSet> targets,
                                                           std::span<const Vector> a_s, std::span<const Vector> a_t,
                                                           std::span<const int> budgets) {
  const std::size_t n = sources.size();
  require(targets.size() == n && a_s.size() == n && a_t.size() == n, "invalid_argument",
          "shared edit needs one source, target and activation pair per node");
  const int kmax = max_budget(budgets);
  std::vector<GreedyState> states;
  states.reserve(n);
  for (std::size_t m = 0; m < n; ++m) states.emplace_back(sources[m], targets[m], a_s[m], a_t[m]);
  // Round r applied a swap at node order[r].
  std::vector<std::size_t> order;
  for (int round = 0; round < kmax; ++round) {
    double gain = 0.0;
    std::size_t bm = 0;
    std::optional<GreedyState::Proposal> bp;
    for (std::size_t m = 0; m < n; ++m) {
      auto p = states[m].propose();
      if (p && states[m].current() - p->distance > gain) {
        gain = states[m].current() - p->distance;
        bm = m;
        bp = p;
      }
    }
    if (!bp) break;
    states[bm].apply(*bp);
    order.push_back(bm);
  }
  std::vector<std::vector<SwapEdit>> out;
  for (int b : budgets) {
    std::vector<std::size_t> used(n, 0);
    for (std::size_t r = 0; r < std::min<std::size_t>(static_cast<std::size_t>(b), order.size()); ++r) ++used[order[r]];
    std::vector<SwapEdit> row;
    for (std::size_t m = 0; m < n; ++m) row.push_back(states[m].prefix(used[m]));
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<SwapEdit> greedy_shared_edit(std::span<const FeatureSet> sources, std::span<const FeatureSet> targets,
                                         std::span<const Vector> a_s, std::span<const Vector> a_t, int k) {
  const int budget[] = {k};
  return greedy_shared_edit_path(sources, targets, a_s, a_t, budget).front();
}

// --- Test 2 -------------------------------------------------------------------

std::string to_string(BudgetMode m) { return m == BudgetMode::PerNode ? "per-node" : "shared"; }

NodeEditor ground_truth_editor() {
  return [](const CounterfactualPair&, const ForwardResult&, const ForwardResult& target,
            std::span<const NodeId> nodes, std::span<const int> budgets) {
    std::vector<Vector> row;
    for (const auto& n : nodes) {
      const auto a = target.cache.at(n);
      row.emplace_back(a.begin(), a.end());
    }
    return std::vector<std::vector<Vector>>(budgets.size(), row);
  };
}

NodeEditor supervised_editor(const std::map<NodeId, SupervisedFeatureDictionary>& dicts) {
  return [&dicts](const CounterfactualPair& pair, const ForwardResult& source, const ForwardResult&,
                  std::span<const NodeId> nodes, std::span<const int> budgets) {
    const std::string& attr = pair.varied_attribute;
    const std::string& from = pair.clean.assignment.at(attr);
    const std::string& to = pair.corrupt.assignment.at(attr);
    std::vector<Vector> untouched, edited;
    for (const auto& n : nodes) {
      const auto a = source.cache.at(n);
      untouched.emplace_back(a.begin(), a.end());
      auto it = dicts.find(n);
      require(it != dicts.end(), "missing_dictionary", "no dictionary for node " + to_string(n));
      edited.push_back(supervised_edit(it->second, a, attr, from, to));
    }
    std::vector<std::vector<Vector>> out;
    for (int k : budgets) out.push_back(k == 0 ? untouched : edited);
    return out;
  };
}

NodeEditor sae_editor(const SparseAutoencoder& sae, BudgetMode mode) {
  return [&sae, mode](const CounterfactualPair&, const ForwardResult& source, const ForwardResult& target,
                      std::span<const NodeId> nodes, std::span<const int> budgets) {
    std::vector<FeatureSet> fs, ft;
    std::vector<Vector> as, at;
    for (const auto& n : nodes) {
      ProjectionResult ps, pt;
      reconstruct_cross_section(sae, source.cache, n, &ps);
      reconstruct_cross_section(sae, target.cache, n, &pt);
      fs.push_back(feature_set(sae, ps));
      ft.push_back(feature_set(sae, pt));
      const auto a = source.cache.at(n);
      const auto b = target.cache.at(n);
      as.emplace_back(a.begin(), a.end());
      at.emplace_back(b.begin(), b.end());
    }
    std::vector<std::vector<Vector>> out(budgets.size());
    if (mode == BudgetMode::Shared) {
      auto path = greedy_shared_edit_path(fs, ft, as, at, budgets);
      for (std::size_t b = 0; b < budgets.size(); ++b)
        for (auto& e : path[b]) out[b].push_back(std::move(e.edited));
    } else {
      for (std::size_t m = 0; m < nodes.size(); ++m) {
        auto path = greedy_sae_edit_path(fs[m], ft[m], as[m], at[m], budgets);
        for (std::size_t b = 0; b < budgets.size(); ++b) out[b].push_back(std::move(path[b].edited));
      }
    }
    return out;
  };
}

namespace {

Token final_argmax(const Matrix& logits) {
  const auto row = logits.row(logits.rows() - 1);
  return static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::vector<EditOutcome> test2_run(const Model& model, const CrossSectionGroup& group, const std::string& method,
                                   std::span<const CounterfactualPair> pairs, std::span<const int> budgets,
                                   const NodeEditor& editor, BudgetMode mode) {
  require(!pairs.empty(), "invalid_argument", "Test 2 needs pairs");
  for (const auto& p : pairs)
    require(p.varied_attribute == group.attribute, "attribute_mismatch",
            "pair varies " + p.varied_attribute + " but group " + group.id() + " expects " + group.attribute);
  for (int k : budgets) require(k >= 0, "invalid_argument", "edit budgets must be >= 0");
  const auto nodes = group.upstream_nodes();
  require(!nodes.empty(), "invalid_argument", "group has no upstream nodes");

  std::vector<std::vector<EditRecord>> rec(pairs.size(), std::vector<EditRecord>(budgets.size()));
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& pair = pairs[i];
    const auto src = model.forward(pair.clean.tokens);
    const auto tgt = model.forward(pair.corrupt.tokens);
    auto patched_prediction = [&](std::vector<Vector> values) {
      Interventions iv;
      for (std::size_t m = 0; m < nodes.size(); ++m) iv.nodes.push_back({nodes[m], std::move(values[m])});
      return final_argmax(model.run(pair.clean.tokens, iv).logits());
    };
    const int zero[] = {0};
    const Token truth = patched_prediction(ground_truth_editor()(pair, src, tgt, nodes, zero).front());
    auto edits = editor(pair, src, tgt, nodes, budgets);
    require(edits.size() == budgets.size(), "invalid_argument", "editor returned the wrong number of budgets");
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      auto& r = rec[i][b];
      r.pair_index = i;
      r.from = pair.clean.assignment.at(pair.varied_attribute);
      r.to = pair.corrupt.assignment.at(pair.varied_attribute);
      r.predicted_truth = truth;
      r.predicted_edit = patched_prediction(std::move(edits[b]));
    }
  });

  std::vector<EditOutcome> out;
  for (std::size_t b = 0; b < budgets.size(); ++b) {
    EditOutcome o;
    o.group = group.id();
    o.method = method;
    o.mode = to_string(mode);
    o.k = budgets[b];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      o.records.push_back(rec[i][b]);
      if (rec[i][b].predicted_edit == rec[i][b].predicted_truth) ++hits;
    }
    o.success_rate = static_cast<double>(hits) / static_cast<double>(pairs.size());
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace sage
