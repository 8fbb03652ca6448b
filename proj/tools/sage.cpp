#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sage/error.hpp"
#include "sage/harness/config.hpp"
#include "sage/harness/manifest.hpp"
#include "sage/harness/pipeline.hpp"
#include "sage/harness/report.hpp"
#include "sage/json_ids.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sage;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
};

// A config file, or a manifest whose recorded config is reused.
RunConfig load_config(const Common& c) {
  if (c.config.empty()) return default_induction_config(c.seed);
  const json j = json::parse(read_text(c.config));
  if (j.contains("stage") && j.contains("config")) return RunConfig::from_json(j.at("config"), fs::path(c.config).parent_path());
  return RunConfig::load(c.config);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run config JSON (or a stage manifest)");
  app->add_option("--seed", c.seed, "seed for the built-in induction config when --config is absent");
  app->add_option("--out", c.out, "output directory")->required();
}

fs::path prepare(const std::string& out) {
  fs::create_directories(out);
  return out;
}

// Verifies an input stage directory and returns its (dir, manifest hash) entry.
std::pair<std::string, std::string> input(const std::string& dir, const std::string& stage) {
  require(!dir.empty(), "missing_input", "no " + stage + " artifact given");
  require(fs::is_directory(dir), "missing_input", stage + " artifact not found: " + dir);
  verify_stage(dir, stage);
  return {fs::absolute(dir).lexically_normal().string(), sha256_file(fs::path(dir) / kManifestName)};
}

// The artifact in dir must have been built from the given upstream manifest.
void require_lineage(const std::string& dir, const std::pair<std::string, std::string>& upstream) {
  const auto m = Manifest::from_json(json::parse(read_text(fs::path(dir) / kManifestName)));
  for (const auto& [path, hash] : m.inputs)
    if (hash == upstream.second) return;
  throw Error("stage_mismatch", dir + " was not produced from " + upstream.first);
}

json summary_test1(const std::vector<Test1Score>& s) {
  json out = json::array();
  for (const auto& x : s)
    out.push_back({{"group", x.group},
                   {"method", x.method},
                   {"sufficiency", format_double(x.sufficiency)},
                   {"necessity", format_double(x.necessity)},
                   {"degenerate", x.degenerate}});
  return out;
}

json summary_test2(const std::vector<EditOutcome>& s) {
  json out = json::array();
  for (const auto& x : s)
    out.push_back({{"group", x.group}, {"method", x.method}, {"mode", x.mode}, {"k", x.k},
                   {"success_rate", format_double(x.success_rate)}});
  return out;
}

std::vector<std::string> files_in(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != kManifestName) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

void finish(const fs::path& dir, const std::string& stage, const RunConfig& cfg,
            std::map<std::string, std::string> inputs, json summary) {
  write_manifest(dir, stage, cfg.to_json(), std::move(inputs), files_in(dir), std::move(summary));
  std::cout << (dir / kManifestName).string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sage: supervised and SAE feature evaluation pipeline"};
  app.require_subcommand(1);

  Common common;
  std::string task_dir, model_dir, sae_dir, discover_dir, dict_dir, test1_dir, test2_dir;

  auto* task = app.add_subcommand("task", "task artifacts");
  task->require_subcommand(1);
  auto* task_gen = task->add_subcommand("gen", "write the task definition");
  add_common(task_gen, common);

  auto* model = app.add_subcommand("model", "model artifacts");
  model->require_subcommand(1);
  auto* model_train = model->add_subcommand("train", "train the transformer and instantiate the task");
  add_common(model_train, common);
  model_train->add_option("--task", task_dir, "task gen output")->required();

  auto* sae = app.add_subcommand("sae", "sparse autoencoder artifacts");
  sae->require_subcommand(1);
  auto* sae_train = sae->add_subcommand("train", "train a residual-stream SAE");
  add_common(sae_train, common);
  sae_train->add_option("--model", model_dir, "model train output")->required();

  auto* discover = app.add_subcommand("discover", "score edges, form and filter cross-section groups");
  add_common(discover, common);
  discover->add_option("--model", model_dir, "model train output")->required();

  auto* fit = app.add_subcommand("fit-dict", "fit supervised feature dictionaries");
  add_common(fit, common);
  fit->add_option("--model", model_dir, "model train output")->required();
  fit->add_option("--discover", discover_dir, "discover output")->required();

  auto* eval = app.add_subcommand("eval", "evaluation tests");
  eval->require_subcommand(1);
  auto* eval1 = eval->add_subcommand("test1", "sufficiency and necessity");
  auto* eval2 = eval->add_subcommand("test2", "sparse controllability");
  for (auto* e : {eval1, eval2}) {
    add_common(e, common);
    e->add_option("--model", model_dir, "model train output")->required();
    e->add_option("--discover", discover_dir, "discover output")->required();
    e->add_option("--dict", dict_dir, "fit-dict output")->required();
    e->add_option("--sae", sae_dir, "sae train output");
  }

  auto* report = app.add_subcommand("report", "write the CSV report");
  add_common(report, common);
  report->add_option("--discover", discover_dir, "discover output");
  report->add_option("--test1", test1_dir, "eval test1 output");
  report->add_option("--test2", test2_dir, "eval test2 output");
  report->footer("Without --discover the whole pipeline runs in memory from --config/--seed.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"code", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = load_config(common);
    const fs::path out = prepare(common.out);

    if (*task_gen) {
      const auto def = stage_task_gen(cfg);
      write_text(out / "task.json", task_to_json(def) + "\n");
      finish(out, "task-gen", cfg, {}, {{"attributes", def.schema.attributes.size()}});
    } else if (*model_train) {
      auto in = input(task_dir, "task-gen");
      const auto def = task_from_json(read_text(fs::path(task_dir) / "task.json"));
      const auto m = stage_model_train(cfg, def);
      save_model_artifact(out, m);
      finish(out, "model-train", cfg, {in},
             {{"accuracy", format_double(m.report.accuracy)}, {"task_accuracy", format_double(m.task_accuracy)}});
    } else if (*sae_train) {
      auto in = input(model_dir, "model-train");
      const auto s = stage_sae_train(cfg, load_model_artifact(model_dir));
      save_sae_artifact(out, s);
      finish(out, "sae-train", cfg, {in},
             {{"reconstruction_mse", format_double(s.report.reconstruction_mse)},
              {"mean_l0", format_double(s.report.mean_l0)}});
    } else if (*discover) {
      auto in = input(model_dir, "model-train");
      const auto d = stage_discover(cfg, load_model_artifact(model_dir));
      save_discover_artifact(out, d);
      finish(out, "discover", cfg, {in},
             {{"formed", d.formed.size()}, {"kept", d.filtered.kept.size()}, {"flags", d.flags}});
    } else if (*fit) {
      auto in_m = input(model_dir, "model-train");
      auto in_d = input(discover_dir, "discover");
      require_lineage(discover_dir, in_m);
      const auto m = load_model_artifact(model_dir);
      const auto dicts = stage_fit_dict(cfg, m, load_discover_artifact(discover_dir, m.weights.config));
      save_dictionaries(out, dicts);
      finish(out, "fit-dict", cfg, {in_m, in_d}, {{"nodes", dicts.size()}});
    } else if (*eval1 || *eval2) {
      const auto in_m = input(model_dir, "model-train"), in_d = input(discover_dir, "discover");
      std::map<std::string, std::string> ins{in_m, in_d, input(dict_dir, "fit-dict")};
      require_lineage(discover_dir, in_m);
      require_lineage(dict_dir, in_d);
      const auto m = load_model_artifact(model_dir);
      const auto d = load_discover_artifact(discover_dir, m.weights.config);
      const auto dicts = load_dictionaries(dict_dir);
      std::optional<SaeArtifact> s;
      if (!sae_dir.empty()) {
        ins.insert(input(sae_dir, "sae-train"));
        require_lineage(sae_dir, in_m);
        s = load_sae_artifact(sae_dir);
      }
      const SaeArtifact* sp = s ? &*s : nullptr;
      if (*eval1) {
        const auto r = stage_eval_test1(cfg, m, d, dicts, sp);
        write_text(out / "test1.json", test1_to_json(r) + "\n");
        finish(out, "eval-test1", cfg, ins, summary_test1(r));
      } else {
        const auto r = stage_eval_test2(cfg, m, d, dicts, sp);
        write_text(out / "test2.json", test2_to_json(r) + "\n");
        finish(out, "eval-test2", cfg, ins, summary_test2(r));
      }
    } else if (*report) {
      std::map<std::string, std::string> ins;
      std::string csv;
      if (discover_dir.empty()) {
        require(test1_dir.empty() && test2_dir.empty(), "missing_input", "report from artifacts needs --discover");
        csv = run_pipeline(cfg).report_csv;
      } else {
        ins.insert(input(discover_dir, "discover"));
        const auto groups = groups_from_json(read_text(fs::path(discover_dir) / "groups.json"));
        std::vector<Test1Score> t1;
        std::vector<EditOutcome> t2;
        const auto in_d = *ins.begin();
        if (!test1_dir.empty()) {
          ins.insert(input(test1_dir, "eval-test1"));
          require_lineage(test1_dir, in_d);
          t1 = test1_from_json(read_text(fs::path(test1_dir) / "test1.json"));
        }
        if (!test2_dir.empty()) {
          ins.insert(input(test2_dir, "eval-test2"));
          require_lineage(test2_dir, in_d);
          t2 = test2_from_json(read_text(fs::path(test2_dir) / "test2.json"));
        }
        csv = report_csv(report_rows(groups, t1, t2));
      }
      write_text(out / "report.csv", csv);
      finish(out, "report", cfg, ins, json::object());
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << json{{"code", e.code()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << json{{"code", "invalid_json"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"code", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
