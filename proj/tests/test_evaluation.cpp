#include <doctest.h>

#include <set>

#include "edit_instances.hpp"
#include "helpers.hpp"
#include "sage/error.hpp"
#include "sage/evaluation.hpp"

using namespace sage;
using namespace sage::testing;

namespace {

struct Fixture {
  Task task{small_ioi()};
  Model model{ModelWeights::init(small_config(2, 2, 16, 8, 0, static_cast<int>(Task(small_ioi()).tokenizer().size()), 17))};
  std::vector<TaskPrompt> prompts;
  MeanStore means;
  CrossSectionGroup group;

  Fixture() {
    Rng rng(1);
    std::vector<std::vector<Token>> toks;
    for (int i = 0; i < 24; ++i) {
      prompts.push_back(sample_prompt(task, Split::Train, rng));
      toks.push_back(prompts.back().tokens);
    }
    means = MeanStore::compute(model, toks);
    const int T = static_cast<int>(prompts[0].tokens.size());
    group.attribute = "io";
    group.edges = {{NodeId::head_out(0, 0, T - 1), {ReadKind::LogitsIn, 0, 0}, T - 1},
                   {NodeId::head_out(1, 1, T - 1), {ReadKind::LogitsIn, 0, 0}, T - 1},
                   {NodeId::head_out(0, 1, 2), {ReadKind::AttnV, 1, 0}, T - 1}};
    group.scores = {1.0, 0.5, 0.25};
    group.selected_subset_size = 3;
  }

  std::vector<CounterfactualPair> pairs(const std::string& attr, int n) const {
    Rng rng(2);
    std::vector<CounterfactualPair> out;
    for (int i = 0; i < n; ++i)
      out.push_back(sample_counterfactual(task, task.templates(Split::Train), prompts[static_cast<std::size_t>(i)], attr, rng));
    return out;
  }
};

}  // namespace

TEST_CASE("Test 1 tautologies hold exactly") {
  Fixture f;
  const auto id = test1(f.model, f.group, "identity", f.prompts, f.means, identity_reconstructor());
  REQUIRE_FALSE(id.degenerate);
  CHECK(id.sufficiency == 1.0);
  CHECK(id.necessity == 1.0);
  const auto mean = test1(f.model, f.group, "mean", f.prompts, f.means, mean_reconstructor(f.means));
  CHECK(mean.sufficiency == 0.0);
  CHECK(mean.l_sufficiency == mean.l_mean);
}

TEST_CASE("zero reconstruction removes the whole activation") {
  Fixture f;
  const Reconstructor zero = [](std::size_t, const NodeId&, const ForwardResult& r) {
    return Vector(static_cast<std::size_t>(r.cache.embed.cols()), 0.0);
  };
  const auto s = test1(f.model, f.group, "zero", f.prompts, f.means, zero);
  CHECK(std::isfinite(s.sufficiency));
  CHECK(std::isfinite(s.necessity));
}

TEST_CASE("a group whose nodes do not affect the metric is degenerate") {
  Fixture f;
  CrossSectionGroup g = f.group;
  // Position-0 head outputs are identical across prompts, so ā equals a.
  g.edges = {{NodeId::head_out(0, 0, 0), {ReadKind::AttnK, 1, 0}, 5}};
  g.selected_subset_size = 1;
  const auto s = test1(f.model, g, "identity", f.prompts, f.means, identity_reconstructor());
  CHECK(s.degenerate);
  CHECK(std::isnan(s.sufficiency));
}

TEST_CASE("greedy edit basics") {
  Rng rng(3);
  const auto e = random_edit_instance(rng);
  const auto k0 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 0);
  CHECK(k0.edited == e.a_s);
  CHECK(k0.swaps.empty());
  const auto k5 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 5);
  double prev = norm(sub(e.a_s, e.a_t));
  for (double d : k5.trajectory) {
    CHECK(d <= prev);
    prev = d;
  }
  std::set<std::size_t> src, tgt;
  for (auto [i, j] : k5.swaps) {
    CHECK(src.insert(i).second);
    CHECK(tgt.insert(j).second);
  }
  CHECK_THROWS_AS(greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, -1), Error);
}

TEST_CASE("one exact swap reaches the target") {
  Rng rng(4);
  auto e = random_edit_instance(rng);
  e.a_t = e.a_s;
  axpy(-e.source.coefficients[0], e.source.directions[0], e.a_t);
  axpy(e.target.coefficients.back(), e.target.directions.back(), e.a_t);
  const auto g = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 1);
  CHECK(g.distance < 1e-12);
}

TEST_CASE("greedy agrees with brute force at k = 1 and never beats it at k = 2") {
  Rng rng(5);
  for (int t = 0; t < 60; ++t) {
    const auto e = random_edit_instance(rng);
    const auto g1 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 1);
    const auto b1 = brute_force_edit(e.source, e.target, e.a_s, e.a_t, 1);
    CHECK(g1.distance == b1.distance);
    CHECK(g1.swaps == b1.swaps);
    const auto g2 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 2);
    const auto b2 = brute_force_edit(e.source, e.target, e.a_s, e.a_t, 2);
    CHECK(b2.distance <= g2.distance);
  }
}

TEST_CASE("brute force handles empty sets and enforces its cap") {
  Rng rng(6);
  FeatureSet empty;
  const auto a = random_vector(5, rng), b = random_vector(5, rng);
  CHECK(brute_force_edit(empty, empty, a, b, 2).edited == a);
  const auto big = random_feature_set(kBruteForceCap + 1, 5, rng);
  CHECK_THROWS_AS(brute_force_edit(big, empty, a, b, 1), Error);
  CHECK_THROWS_AS(brute_force_edit(empty, empty, a, b, 3), Error);
}

TEST_CASE("greedy path is prefix consistent with single-budget runs") {
  Rng rng(7);
  const auto e = random_edit_instance(rng);
  const int budgets[] = {0, 1, 3, 6};
  const auto path = greedy_sae_edit_path(e.source, e.target, e.a_s, e.a_t, budgets);
  for (std::size_t b = 0; b < 4; ++b) {
    const auto single = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, budgets[b]);
    CHECK(path[b].edited == single.edited);
  }
}

TEST_CASE("shared budget spends swaps where they help most") {
  Rng rng(8);
  const auto e1 = random_edit_instance(rng), e2 = random_edit_instance(rng);
  const std::vector<FeatureSet> s{e1.source, e2.source}, t{e1.target, e2.target};
  const std::vector<Vector> as{e1.a_s, e2.a_s}, at{e1.a_t, e2.a_t};
  const auto one = greedy_shared_edit(s, t, as, at, 1);
  const auto g1 = greedy_sae_edit(e1.source, e1.target, e1.a_s, e1.a_t, 1);
  const auto g2 = greedy_sae_edit(e2.source, e2.target, e2.a_s, e2.a_t, 1);
  const double gain1 = norm(sub(e1.a_s, e1.a_t)) - g1.distance;
  const double gain2 = norm(sub(e2.a_s, e2.a_t)) - g2.distance;
  CHECK(one[0].swaps.size() + one[1].swaps.size() <= 1);
  if (gain1 > gain2 && gain1 > 0) CHECK(one[0].edited == g1.edited);
  if (gain2 > gain1 && gain2 > 0) CHECK(one[1].edited == g2.edited);
  const auto zero = greedy_shared_edit(s, t, as, at, 0);
  CHECK(zero[0].edited == e1.a_s);
}

TEST_CASE("Test 2 ground truth is self-consistent and pairs must match the group") {
  Fixture f;
  const auto pairs = f.pairs("io", 12);
  const int budgets[] = {0, 4};
  const auto gt = test2_run(f.model, f.group, "ground-truth", pairs, budgets, ground_truth_editor());
  REQUIRE(gt.size() == 2);
  for (const auto& o : gt) {
    CHECK(o.success_rate == 1.0);
    CHECK(o.records.size() == pairs.size());
    CHECK(o.mode == "per-node");
  }
  CHECK(gt[1].k == 4);
  const auto wrong = f.pairs("subject", 3);
  CHECK_THROWS_AS(test2_run(f.model, f.group, "ground-truth", wrong, budgets, ground_truth_editor()), Error);
}

TEST_CASE("supervised editor leaves the source alone at k = 0") {
  Fixture f;
  const auto pairs = f.pairs("io", 6);
  std::map<NodeId, SupervisedFeatureDictionary> dicts;
  for (const auto& n : f.group.upstream_nodes()) {
    SupervisedFeatureDictionary d;
    d.node = n;
    d.mean.assign(16, 0.0);
    for (const auto& v : f.task.schema().at("io").values) d.features[{"io", v}] = Vector(16, 0.1);
    dicts.emplace(n, d);
  }
  const auto editor = supervised_editor(dicts);
  const auto src = f.model.forward(pairs[0].clean.tokens), tgt = f.model.forward(pairs[0].corrupt.tokens);
  const auto nodes = f.group.upstream_nodes();
  const int budgets[] = {0, 4};
  const auto out = editor(pairs[0], src, tgt, nodes, budgets);
  for (std::size_t m = 0; m < nodes.size(); ++m) {
    const auto a = src.cache.at(nodes[m]);
    CHECK(std::equal(a.begin(), a.end(), out[0][m].begin()));
    // Equal feature vectors make the edit a no-op as well.
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[1][m][i] == doctest::Approx(a[i]));
  }
}

TEST_CASE("k = 0 SAE edit success equals the base agreement rate") {
  Fixture f;
  const auto pairs = f.pairs("io", 12);
  Rng rng(9);
  const auto sae = random_sae(16, 40, rng, 1);
  const int budgets[] = {0};
  const auto o = test2_run(f.model, f.group, "sae", pairs, budgets, sae_editor(sae, BudgetMode::PerNode));
  std::size_t agree = 0;
  for (const auto& r : o[0].records) {
    const auto& p = pairs[r.pair_index];
    const auto l = f.model.forward(p.clean.tokens).logits();
    const auto row = l.row(l.rows() - 1);
    agree += static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin()) == r.predicted_truth;
  }
  CHECK(o[0].success_rate == static_cast<double>(agree) / 12.0);
}
