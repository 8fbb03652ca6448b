// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "edit_instances.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "sage/harness/config.hpp"
#include "sage/parallel.hpp"
#include "sage/harness/manifest.hpp"
#include "sage/harness/pipeline.hpp"
#include "sage/harness/report.hpp"
#include "synthetic.hpp"

using namespace sage;
using namespace sage::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// --- staged pipeline runs ---------------------------------------------------------

struct TimedRun {
  PipelineResult result;
  std::map<std::string, double> seconds;
  double total = 0.0;
};

TimedRun run_staged(const RunConfig& cfg) {
  TimedRun r;
  const auto start = Clock::now();
  auto timed = [&](const char* name, auto&& fn) {
    const auto t0 = Clock::now();
    fn();
    r.seconds[name] = seconds_since(t0);
  };
  auto& p = r.result;
  timed("task-gen", [&] { p.skeleton = stage_task_gen(cfg); });
  timed("model-train", [&] { p.model = stage_model_train(cfg, p.skeleton); });
  timed("sae-train", [&] { p.sae = stage_sae_train(cfg, p.model); });
  timed("discover", [&] { p.discover = stage_discover(cfg, p.model); });
  timed("fit-dict", [&] { p.dicts = stage_fit_dict(cfg, p.model, p.discover); });
  timed("eval-test1", [&] { p.eval.test1 = stage_eval_test1(cfg, p.model, p.discover, p.dicts, &p.sae); });
  timed("eval-test2", [&] { p.eval.test2 = stage_eval_test2(cfg, p.model, p.discover, p.dicts, &p.sae); });
  p.report_csv = report_csv(report_rows(p.discover.filtered.kept, p.eval.test1, p.eval.test2));
  r.total = seconds_since(start);
  return r;
}

// The same pipeline with every artifact written to disk and read back between stages.
std::string run_through_disk(const RunConfig& cfg, const fs::path& dir) {
  fs::remove_all(dir);
  for (const char* s : {"model", "sae", "discover", "dict"}) fs::create_directories(dir / s);
  const auto skeleton = task_from_json(task_to_json(stage_task_gen(cfg)));
  save_model_artifact(dir / "model", stage_model_train(cfg, skeleton));
  const auto model = load_model_artifact(dir / "model");
  save_sae_artifact(dir / "sae", stage_sae_train(cfg, model));
  const auto sae = load_sae_artifact(dir / "sae");
  save_discover_artifact(dir / "discover", stage_discover(cfg, model));
  const auto disc = load_discover_artifact(dir / "discover", model.weights.config);
  save_dictionaries(dir / "dict", stage_fit_dict(cfg, model, disc));
  const auto dicts = load_dictionaries(dir / "dict");
  const auto t1 = test1_from_json(test1_to_json(stage_eval_test1(cfg, model, disc, dicts, &sae)));
  const auto t2 = test2_from_json(test2_to_json(stage_eval_test2(cfg, model, disc, dicts, &sae)));
  const auto groups = groups_from_json(read_text(dir / "discover" / "groups.json"));
  return report_csv(report_rows(groups, t1, t2));
}

const Test1Score* find_score(const std::vector<Test1Score>& s, const std::string& group, const std::string& method) {
  for (const auto& x : s)
    if (x.group == group && x.method == method) return &x;
  return nullptr;
}

// --- criteria ----------------------------------------------------------------

Outcome criterion1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::uniform_int_distribution<int> layers(1, 3), heads(1, 4), dsel(0, 3), dh(2, 8), vocab(8, 30), len(2, 8),
      coin(0, 1);
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    ModelConfig cfg;
    cfg.n_layers = layers(rng);
    cfg.n_heads = heads(rng);
    cfg.d_model = 8 * (dsel(rng) + 1);
    cfg.d_head = dh(rng);
    cfg.d_mlp = coin(rng) ? 2 * cfg.d_model : 0;
    cfg.vocab_size = vocab(rng);
    cfg.max_seq = 8;
    cfg.seed = rng();
    const Model m(ModelWeights::init(cfg));
    const int T = len(rng);
    const auto toks = random_tokens(T, cfg.vocab_size, rng);
    std::vector<NodeId> nodes;
    for (int t = 0; t < T; ++t) {
      nodes.push_back(NodeId::embed(t));
      for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) nodes.push_back(NodeId::head_out(l, h, t));
        if (cfg.d_mlp) nodes.push_back(NodeId::mlp_out(l, t));
        nodes.push_back(NodeId::resid_post(l, t));
      }
    }
    const NodeId node = nodes[std::uniform_int_distribution<std::size_t>(0, nodes.size() - 1)(rng)];
    const auto metric = mixed_metric(cfg.vocab_size);
    const auto g = m.backward(m.forward(toks), metric);
    const auto fd = node_fd_gradient(m, toks, metric, node);
    worst = std::max(worst, relative_error(g.nodes.at(node), fd));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "20 cases, max relative error " + fmt("%.2e", worst) + " (< 1e-4), " + fmt("%.1f", secs) + " s"};
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  Rng rng(202);
  const Task task(small_ioi());
  double worst = 0.0;
  for (int c = 0; c < 50; ++c) {
    // An MLP after the last attention layer would make value edges nonlinear.
    auto cfg = small_config(2, 2 + c % 3, 16, 8, c % 4 == 0 ? 32 : 0, static_cast<int>(task.tokenizer().size()), rng());
    auto w = ModelWeights::init(cfg);
    // Value-edge instances: zero last-layer queries so attention is uniform and the
    // metric is one fixed affine function of the edge in both the clean and corrupt run.
    if (c % 2 == 1)
      for (auto& h : w.layers.back().heads) h.w_q = Matrix(h.w_q.rows(), h.w_q.cols());
    const Model m(std::move(w));
    const auto p = sample_prompt(task, Split::Train, rng);
    const char* attrs[] = {"io", "subject", "order"};
    const auto pair = sample_counterfactual(task, task.templates(Split::Train), p, attrs[c % 3], rng);
    const int T = static_cast<int>(p.tokens.size());
    std::uniform_int_distribution<int> layer(0, cfg.n_layers - 1), head(0, cfg.n_heads - 1), pos(0, T - 1);
    EdgeId e;
    if (c % 2 == 0) {
      e = {NodeId::head_out(layer(rng), head(rng), T - 1), {ReadKind::LogitsIn, 0, 0}, T - 1};
    } else {
      e = {NodeId::head_out(0, head(rng), pos(rng)), {ReadKind::AttnV, cfg.n_layers - 1, head(rng)}, T - 1};
    }
    Metric metric;
    for (int k = 0; k < 3; ++k)
      metric.linear.push_back({std::uniform_int_distribution<int>(0, cfg.vocab_size - 1)(rng),
                               std::normal_distribution<double>(0.0, 1.0)(rng)});
    const std::vector<EdgeId> edges{e};
    const double truth = patching_effect(m, pair, metric, e);
    const double est[] = {attribution_basic(m, pair, metric, edges)[0],
                          attribution_integrated(m, pair, metric, edges, 1 + c % 7)[0],
                          attribution_clean_corrupt(m, pair, metric, edges)[0]};
    for (double v : est) worst = std::max(worst, std::abs(v - truth));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 60.0,
          "50 instances x 3 estimators, max |estimate - effect| " + fmt("%.2e", worst) + " (< 1e-8), " +
              fmt("%.1f", secs) + " s"};
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

Outcome criterion3(const RunConfig& cfg, const ModelArtifact& m, double train_seconds) {
  const auto t0 = Clock::now();
  const Task task(m.task);
  const Model model(m.weights);
  const auto pairs = sample_pairs(task, Split::Train, m.task.target_attribute, 20, 303);
  EdgeInventoryOptions opt;
  opt.first_position = last_attribute_position(m.task);
  const auto edges = edge_inventory(m.weights.config, static_cast<int>(pairs[0].clean.tokens.size()), opt);
  AttributionConfig ac;
  ac.estimator = Estimator::CleanCorrupt;
  const auto table = average_attributions(model, pairs, edges, ac);
  std::vector<std::size_t> order(edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double fa = std::abs(table.scores[a].score), fb = std::abs(table.scores[b].score);
    return fa != fb ? fa > fb : a < b;
  });
  order.resize(std::min<std::size_t>(50, order.size()));
  std::vector<double> scores, effects(order.size(), 0.0);
  for (std::size_t k : order) scores.push_back(table.scores[k].score);
  parallel_for(order.size(), [&](std::size_t i) {
    for (const auto& p : pairs)
      effects[i] += patching_effect(model, p, Metric::logit_diff(p.clean.target, p.clean.contrast), edges[order[i]]) /
                    static_cast<double>(pairs.size());
  });
  const double r = pearson(scores, effects);
  const double secs = seconds_since(t0) + train_seconds;
  (void)cfg;
  return {m.task_accuracy >= 0.95 && r >= 0.8 && secs < 600.0,
          "accuracy " + fmt("%.3f", m.task_accuracy) + " (>= 0.95), Pearson over top-50 edges " + fmt("%.3f", r) +
              " (>= 0.8), " + fmt("%.0f", secs) + " s including training"};
}

Outcome criterion4() {
  const std::size_t d = 64;
  const auto clean = make_synthetic(10000, d, 0.0, 404);
  const auto dict0 = fit_supervised(NodeId::embed(0), clean.activations, clean.assignments, clean.schema);
  const double resid0 = max_reconstruction_residual(dict0, clean);
  const double sigma = 0.1;
  const auto noisy = make_synthetic(10000, d, sigma, 405);
  const auto dict1 = fit_supervised(NodeId::embed(0), noisy.activations, noisy.assignments, noisy.schema);
  // Per-row squared residual against σ²·d.
  const double per_row = dict1.residual_mse * static_cast<double>(d);
  const double floor = sigma * sigma * static_cast<double>(d);
  const double rel = std::abs(per_row - floor) / floor;
  return {resid0 < 1e-8 && rel <= 0.10, "noise-free max residual " + fmt("%.2e", resid0) +
                                            " (< 1e-8); noisy residual " + fmt("%.4f", per_row) + " vs sigma^2 d " +
                                            fmt("%.4f", floor) + " (" + fmt("%.1f", 100 * rel) + "% <= 10%)"};
}

Outcome criterion5(const std::vector<TimedRun>& runs) {
  std::size_t groups = 0;
  bool ok = true;
  std::string bad;
  for (const auto& r : runs) {
    for (const auto& g : r.result.discover.filtered.kept) {
      ++groups;
      const auto* id = find_score(r.result.eval.test1, g.id(), "identity");
      const auto* mean = find_score(r.result.eval.test1, g.id(), "mean");
      const bool good = id && mean && !id->degenerate && id->sufficiency == 1.0 && id->necessity == 1.0 &&
                        mean->sufficiency == 0.0;
      if (!good) {
        ok = false;
        bad += " " + g.id();
      }
    }
  }
  return {ok && groups > 0, std::to_string(groups) + " retained groups over " + std::to_string(runs.size()) +
                                " seeds; identity = 1 exactly, mean sufficiency = 0 exactly" +
                                (bad.empty() ? "" : "; failing:" + bad)};
}

Outcome criterion6(const std::vector<TimedRun>& runs, const std::vector<std::uint64_t>& seeds) {
  bool ok = true;
  double total = 0.0;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& r = runs[s].result;
    total += runs[s].total;
    std::string best = "none";
    bool seed_ok = false;
    double best_min = -1.0;
    for (const auto& g : r.discover.filtered.kept) {
      const auto* sup = find_score(r.eval.test1, g.id(), "supervised");
      if (!sup || sup->degenerate) continue;
      int kmax = -1;
      double success = 0.0, base = 0.0;
      for (const auto& o : r.eval.test2)
        if (o.group == g.id() && o.method == "supervised") {
          if (o.k > kmax) {
            kmax = o.k;
            success = o.success_rate;
          }
          if (o.k == 0) base = o.success_rate;
        }
      // Groups already at the success bar without any edit say nothing about control.
      const bool pass = sup->sufficiency >= 0.85 && sup->necessity >= 0.85 && success >= 0.75 && base < 0.75;
      const double worst = std::min({sup->sufficiency / 0.9, sup->necessity / 0.9, success / 0.8});
      if ((pass && !seed_ok) || (pass == seed_ok && worst > best_min)) {
        best_min = worst;
        best = g.id() + " suff " + fmt("%.3f", sup->sufficiency) + " nec " + fmt("%.3f", sup->necessity) +
               " success@k" + std::to_string(kmax) + " " + fmt("%.3f", success) + " (k0 " + fmt("%.3f", base) + ")";
      }
      seed_ok = seed_ok || pass;
    }
    ok = ok && seed_ok;
    detail += "seed " + std::to_string(seeds[s]) + ": " + best + " [" + fmt("%.0f", runs[s].total) + " s]; ";
  }
  ok = ok && total <= 1800.0;
  return {ok, detail + "targets 0.9/0.9/0.8 with -0.05 tolerance, k0 success below 0.75; total " + fmt("%.0f", total) + " s (<= 1800)"};
}

Outcome criterion7() {
  Rng rng(707);
  int k1_match = 0, k2_ok = 0;
  for (int i = 0; i < 200; ++i) {
    const auto e = random_edit_instance(rng);
    const auto g1 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 1);
    const auto b1 = brute_force_edit(e.source, e.target, e.a_s, e.a_t, 1);
    k1_match += g1.distance == b1.distance;
    const auto g2 = greedy_sae_edit(e.source, e.target, e.a_s, e.a_t, 2);
    const auto b2 = brute_force_edit(e.source, e.target, e.a_s, e.a_t, 2);
    k2_ok += b2.distance <= g2.distance;
  }
  return {k1_match == 200 && k2_ok == 200, "k=1 matches " + std::to_string(k1_match) + "/200, k=2 never better " +
                                               std::to_string(k2_ok) + "/200"};
}

Outcome criterion8(const SparseAutoencoder* trained, const ModelArtifact* m) {
  Rng rng(808);
  double worst = 0.0;
  int covered = 0, empties = 0, empty_ok = 0;
  auto try_instance = [&](const SparseAutoencoder& sae, std::span<const double> x) {
    const auto probe = project_sublayer(sae, x, Vector(sae.input_dim(), 0.0), -1e300);
    if (probe.active.empty()) return;
    std::vector<std::size_t> chosen;
    std::uniform_int_distribution<std::size_t> pick(0, probe.active.size() - 1);
    const std::size_t n = std::min<std::size_t>(probe.active.size(), 1 + rng() % 4);
    std::set<std::size_t> seen;
    while (chosen.size() < n) {
      const auto f = probe.active[pick(rng)];
      if (seen.insert(f).second) chosen.push_back(f);
    }
    Vector h(sae.input_dim(), 0.0);
    std::uniform_real_distribution<double> coef(0.5, 3.0);
    for (auto f : chosen) axpy(coef(rng), sae.feature(f), h);
    const auto p = project_sublayer(sae, x, h);
    for (auto f : chosen)
      if (std::find(p.selected.begin(), p.selected.end(), f) == p.selected.end()) return;
    ++covered;
    worst = std::max(worst, norm(sub(p.reconstruction, h)));
  };
  for (int i = 0; i < 200; ++i) {
    const auto sae = random_sae(16, 48, rng);
    try_instance(sae, random_vector(16, rng));
  }
  if (trained && m) {
    const Task task(m->task);
    const Model model(m->weights);
    const auto prompts = sample_prompts(task, Split::Test, 40, 809);
    for (const auto& p : prompts) {
      const auto run = model.forward(p.tokens);
      const auto x = run.cache.at(NodeId::resid_post(trained->layer, static_cast<int>(p.tokens.size()) - 1));
      try_instance(*trained, x);
    }
  }
  for (int i = 0; i < 20; ++i) {
    auto sae = random_sae(16, 48, rng);
    for (auto& b : sae.b_enc) b = -1e6;
    ++empties;
    try {
      const auto p = project_sublayer(sae, random_vector(16, rng), random_vector(16, rng));
      empty_ok += p.empty && p.reconstruction == Vector(16, 0.0);
    } catch (...) {
    }
  }
  return {covered >= 100 && worst < 1e-8 && empty_ok == empties,
          std::to_string(covered) + " in-span instances, max error " + fmt("%.2e", worst) + " (< 1e-8); empty sets " +
              std::to_string(empty_ok) + "/" + std::to_string(empties) + " flagged zero"};
}

// Mean cross-entropy of r + t + r predicting t, computed directly from logits.
double rescore(const Model& model, const InductionSample& s) {
  double total = 0.0;
  for (Token t : s.probes) {
    std::vector<Token> x(s.prefix);
    x.push_back(t);
    x.insert(x.end(), s.prefix.begin(), s.prefix.end());
    const auto logits = model.forward(x).logits();
    const auto row = logits.row(logits.rows() - 1);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += -(row[static_cast<std::size_t>(t)] - mx - std::log(z));
  }
  return total / static_cast<double>(s.probes.size());
}

Outcome criterion9(const std::vector<TimedRun>& runs, const RunConfig& cfg) {
  int checked = 0, ok = 0;
  double worst = 0.0;
  for (const auto& r : runs) {
    const Model model(r.result.model.weights);
    std::vector<InductionSample> samples = r.result.model.samples;
    Rng rng(909);
    const Task task(r.result.model.task);
    const auto pool = task.filler_tokens();
    for (int i = 0; i < 10; ++i) samples.push_back(sample_induction_sequence(model, pool, cfg.sampler.sampler, rng));
    for (const auto& s : samples) {
      const double ce = rescore(model, s);
      ++checked;
      worst = std::max(worst, ce);
      ok += ce <= cfg.sampler.sampler.threshold;
    }
  }
  return {checked > 0 && ok == checked, std::to_string(ok) + "/" + std::to_string(checked) +
                                            " accepted sequences re-scored <= tau = " +
                                            fmt("%.2f", cfg.sampler.sampler.threshold) + " (max " +
                                            fmt("%.4f", worst) + ")"};
}

Outcome criterion10(const RunConfig& cfg, const std::string& first_csv) {
  const auto t0 = Clock::now();
  const auto again = run_pipeline(cfg).report_csv;
  const auto disk = run_through_disk(cfg, fs::temp_directory_path() / "sage_acceptance_run");
  const bool same = again == first_csv && disk == first_csv;
  return {same, "in-memory rerun " + std::string(again == first_csv ? "identical" : "DIFFERS") +
                    ", rerun through saved artifacts " + (disk == first_csv ? "identical" : "DIFFERS") + " (sha " +
                    sha256_hex(first_csv).substr(0, 12) + ", " + fmt("%.0f", seconds_since(t0)) + " s)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string csv_dir;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--seeds", seeds, "pipeline seeds for the end-to-end criteria")->delimiter(',');
  app.add_option("--csv-dir", csv_dir, "write each seed's report CSV here");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::map<int, Outcome> results;
  auto guarded = [&](int c, const std::function<Outcome()>& fn) {
    if (!wanted(c)) return;
    try {
      results[c] = fn();
    } catch (const std::exception& e) {
      results[c] = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << c << ": " << (results[c].pass ? "PASS" : "FAIL") << "  " << results[c].detail
              << std::endl;
  };

  guarded(1, criterion1);
  guarded(2, criterion2);
  guarded(4, criterion4);
  guarded(7, criterion7);

  const bool need_runs = wanted(3) || wanted(5) || wanted(6) || wanted(8) || wanted(9) || wanted(10);
  std::vector<TimedRun> runs;
  std::string run_error;
  if (need_runs) {
    try {
      for (auto s : seeds) {
        runs.push_back(run_staged(default_induction_config(s)));
        std::cerr << "seed " << s << " pipeline: " << fmt("%.0f", runs.back().total) << " s (";
        for (const auto& [k, v] : runs.back().seconds) std::cerr << k << " " << fmt("%.0f", v) << " ";
        std::cerr << ")" << std::endl;
        if (!csv_dir.empty()) {
          fs::create_directories(csv_dir);
          write_text(fs::path(csv_dir) / ("report_seed" + std::to_string(s) + ".csv"), runs.back().result.report_csv);
        }
      }
    } catch (const std::exception& e) {
      run_error = e.what();
    }
  }
  auto with_runs = [&](const std::function<Outcome()>& fn) -> std::function<Outcome()> {
    return [&, fn] {
      if (!run_error.empty() || runs.size() != seeds.size()) return Outcome{false, "pipeline failed: " + run_error};
      return fn();
    };
  };
  const auto cfg0 = default_induction_config(seeds.front());
  guarded(3, with_runs([&] { return criterion3(cfg0, runs[0].result.model, runs[0].seconds.at("model-train")); }));
  guarded(5, with_runs([&] { return criterion5(runs); }));
  guarded(6, with_runs([&] { return criterion6(runs, seeds); }));
  guarded(8, [&] {
    return runs.empty() ? criterion8(nullptr, nullptr) : criterion8(&runs[0].result.sae.sae, &runs[0].result.model);
  });
  guarded(9, with_runs([&] { return criterion9(runs, cfg0); }));
  guarded(10, with_runs([&] { return criterion10(cfg0, runs[0].result.report_csv); }));

  bool all = true;
  for (const auto& [c, r] : results) all = all && r.pass;
  std::cout << (all ? "all selected criteria passed" : "some criteria FAILED") << std::endl;
  return all ? 0 : 1;
}
