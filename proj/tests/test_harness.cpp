#include <doctest.h>

#include <filesystem>
#include <cstring>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "sage/error.hpp"
#include "sage/harness/config.hpp"
#include "sage/harness/manifest.hpp"
#include "sage/harness/pipeline.hpp"
#include "sage/harness/report.hpp"
#include "sage/harness/tensor_io.hpp"

using namespace sage;
using namespace sage::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("sage_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("tensors round-trip bit for bit") {
  Rng rng(1);
  std::uniform_int_distribution<int> rank(0, 4), dim(1, 5);
  for (int t = 0; t < 50; ++t) {
    Tensor x;
    const int r = rank(rng);
    std::size_t n = 1;
    for (int i = 0; i < r; ++i) {
      x.dims.push_back(static_cast<std::uint32_t>(dim(rng)));
      n *= x.dims.back();
    }
    for (double v : random_vector(n, rng, 100.0)) x.data.push_back(static_cast<float>(v));
    std::stringstream ss;
    write_tensor(ss, x);
    CHECK(ss.str().size() == 8 + 4 * r + 4 * n);
    const auto y = read_tensor(ss);
    CHECK(y.dims == x.dims);
    CHECK(std::memcmp(x.data.data(), y.data.data(), 4 * n) == 0);
  }
}

TEST_CASE("tensor files are validated") {
  const auto dir = scratch("tensor");
  const auto t = make_tensor({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  save_tensor(dir / "a.sgt", t);
  CHECK(load_tensor(dir / "a.sgt").data == t.data);
  {
    std::ofstream f(dir / "a.sgt", std::ios::binary | std::ios::app);
    f.put('x');
  }
  CHECK_THROWS_AS(load_tensor(dir / "a.sgt"), Error);
  {
    std::ofstream f(dir / "b.sgt", std::ios::binary);
    f << "SGT2";
  }
  CHECK_THROWS_AS(load_tensor(dir / "b.sgt"), Error);
  CHECK_THROWS_AS(load_tensor(dir / "missing.sgt"), Error);
  std::stringstream cut;
  write_tensor(cut, t);
  std::stringstream truncated(cut.str().substr(0, 20));
  CHECK_THROWS_AS(read_tensor(truncated), Error);
}

TEST_CASE("archives keep names and order") {
  const auto dir = scratch("archive");
  std::vector<NamedTensor> ts{{"w", make_tensor({2}, std::vector<double>{1, 2})},
                              {"b", make_tensor({1, 1}, std::vector<double>{3})}};
  save_archive(dir / "x.sgt", ts);
  CHECK(fs::exists(archive_index_path(dir / "x.sgt")));
  const auto back = load_archive(dir / "x.sgt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "w");
  CHECK(back[1].tensor.dims == std::vector<std::uint32_t>{1, 1});
}

TEST_CASE("manifests detect tampering and stage mismatches") {
  const auto dir = scratch("manifest");
  write_text(dir / "out.txt", "hello");
  write_manifest(dir, "discover", nlohmann::json::object(), {}, {"out.txt"});
  CHECK_NOTHROW(verify_stage(dir, "discover"));
  CHECK_THROWS_AS(verify_stage(dir, "fit-dict"), Error);
  write_text(dir / "out.txt", "hullo");
  try {
    verify_stage(dir, "discover");
    FAIL("expected a stage error");
  } catch (const Error& e) {
    CHECK(e.code() == "stage_mismatch");
    CHECK(std::string(e.what()).find("out.txt") != std::string::npos);
  }
  CHECK_THROWS_AS(verify_stage(scratch("empty"), "discover"), Error);
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("run configs round-trip through JSON") {
  auto c = default_induction_config(42);
  c.attribution.first_position = 5;
  c.evaluation.modes = {BudgetMode::PerNode, BudgetMode::Shared};
  const auto j = c.to_json();
  const auto back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.seeds.sae == c.seeds.sae);
  CHECK(back.training.train.adam.learning_rate == c.training.train.adam.learning_rate);
  CHECK(derive_seeds(42).task != derive_seeds(43).task);
  nlohmann::json bad = j;
  bad["task"]["kind"] = "nope";
  CHECK_THROWS_AS(RunConfig::from_json(bad), Error);
  nlohmann::json override_seed = j;
  override_seed["seeds"]["sae"] = "5";
  CHECK(RunConfig::from_json(override_seed).sae.sae.seed == 5);
}

TEST_CASE("report CSV has a fixed header and one row per metric") {
  CrossSectionGroup g{"ind2", Sign::Positive, {{NodeId::head_out(0, 0, 3), {ReadKind::LogitsIn, 0, 0}, 3}}, {1.0}, 1, 0.5};
  Test1Score s{"ind2-positive", "identity", 1.0, 1.0, 2.0, 2.0, 0.5, 0.5, false};
  EditOutcome o{"ind2-positive", "supervised", "per-node", 4, 0.75, {}};
  const auto csv = report_csv(report_rows(std::vector{g}, std::vector{s}, std::vector{o}));
  CHECK(csv.rfind("group,attribute,sign,method,metric,budget,value\n", 0) == 0);
  CHECK(csv.find("ind2-positive,ind2,positive,identity,sufficiency,,1\n") != std::string::npos);
  CHECK(csv.find("ind2-positive,ind2,positive,supervised/per-node,success_rate,4,0.75\n") != std::string::npos);
  CHECK(report_csv(std::vector<ReportRow>{}) == "group,attribute,sign,method,metric,budget,value\n");
}

TEST_CASE("evaluation results round-trip through JSON") {
  Test1Score s{"g", "sae", std::nan(""), 0.25, 1, 2, 3, 4, true};
  const auto t1 = test1_from_json(test1_to_json(std::vector{s}));
  CHECK(std::isnan(t1[0].sufficiency));
  CHECK(t1[0].necessity == 0.25);
  CHECK(t1[0].degenerate);
  EditOutcome o{"g", "sae", "shared", 8, 0.5, {{0, "cat", "dog", 3, 4}, {1, "dog", "cat", 5, 5}}};
  const auto t2 = test2_from_json(test2_to_json(std::vector{o}));
  CHECK(t2[0].records.size() == 2);
  CHECK(t2[0].records[0].predicted_edit == 3);
  CHECK(t2[0].mode == "shared");
}

TEST_CASE("model and dictionary artifacts reload exactly") {
  const auto dir = scratch("artifacts");
  ModelArtifact m;
  auto cfg = small_config(2, 2, 8, 4, 6, 12);
  m.weights = ModelWeights::init(cfg);
  m.weights.round_to_float();
  m.task = small_ioi();
  m.report.loss_curve = {1.5, 0.25};
  m.task_accuracy = 0.875;
  save_model_artifact(dir, m);
  const auto back = load_model_artifact(dir);
  CHECK(back.weights.config == cfg);
  CHECK(back.weights.embed == m.weights.embed);
  CHECK(back.weights.layers[1].w_out == m.weights.layers[1].w_out);
  CHECK(back.report.loss_curve == m.report.loss_curve);
  CHECK(task_to_json(back.task) == task_to_json(m.task));

  DictionaryMap dicts;
  SupervisedFeatureDictionary d;
  d.node = NodeId::head_out(1, 0, 4);
  d.mean = {0.5, -1.0};
  d.features[{"io", "Ann"}] = {1.0, 2.0};
  d.residual_mse = 0.125;
  round_to_float(d);
  dicts.emplace(d.node, d);
  save_dictionaries(dir, dicts);
  const auto db = load_dictionaries(dir);
  CHECK(db.at(d.node).features == d.features);
  CHECK(db.at(d.node).mean == d.mean);
}

TEST_CASE("last attribute position counts expanded sequence slots") {
  const auto sk = build_induction_skeleton({"cat", "dog"}, {"red", "blue"}, 4);
  // seq(4), "b , a , b , a", seq(4), "b , a ,": the last slot sits at 4 + 7 + 4 + 2.
  CHECK(last_attribute_position(sk) == 17);
  const auto inst = build_induction_task(sk, {{"red", "blue", "red", "blue"}}, {{"blue", "red", "red", "blue"}});
  CHECK(last_attribute_position(inst) == 17);
}
