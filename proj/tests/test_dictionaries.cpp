#include <doctest.h>

#include "helpers.hpp"
#include "sage/dictionaries.hpp"
#include "sage/error.hpp"
#include "synthetic.hpp"

using namespace sage;
using namespace sage::testing;

TEST_CASE("noise-free activations are reconstructed exactly") {
  const auto s = make_synthetic(400, 12, 0.0, 1);
  const auto dict = fit_supervised(NodeId::head_out(0, 0, 3), s.activations, s.assignments, s.schema);
  CHECK(max_reconstruction_residual(dict, s) < 1e-8);
  CHECK(dict.residual_mse < 1e-16);
  // Differences within an attribute are identified even though absolute offsets are not.
  const auto du = sub(dict.feature("color", "red"), dict.feature("color", "blue"));
  const auto dt = sub(s.features.at({"color", "red"}), s.features.at({"color", "blue"}));
  for (std::size_t i = 0; i < du.size(); ++i) CHECK(du[i] == doctest::Approx(dt[i]).epsilon(1e-9));
}

TEST_CASE("noisy fit residual approaches the noise floor") {
  const double sigma = 0.3;
  const std::size_t d = 8;
  const auto s = make_synthetic(4000, d, sigma, 2);
  const auto dict = fit_supervised(NodeId::embed(0), s.activations, s.assignments, s.schema);
  CHECK(dict.residual_mse * d == doctest::Approx(sigma * sigma * d).epsilon(0.1));
}

TEST_CASE("supervised edits reach the counterfactual and invert exactly") {
  const auto s = make_synthetic(300, 10, 0.0, 3);
  const auto dict = fit_supervised(NodeId::embed(0), s.activations, s.assignments, s.schema);
  const auto a = s.activations.row(0);
  const auto& from = s.assignments[0].at("shape");
  const std::string to = from == "ring" ? "box" : "ring";
  const auto edited = supervised_edit(dict, a, "shape", from, to);
  Vector truth(a.begin(), a.end());
  axpy(-1.0, s.features.at({"shape", from}), truth);
  axpy(1.0, s.features.at({"shape", to}), truth);
  for (std::size_t i = 0; i < truth.size(); ++i) CHECK(std::abs(edited[i] - truth[i]) < 1e-8);
  const auto back = supervised_edit(dict, edited, "shape", to, from);
  for (std::size_t i = 0; i < truth.size(); ++i) CHECK(std::abs(back[i] - a[i]) < 1e-10);
  const auto same = supervised_edit(dict, a, "shape", from, from);
  CHECK(std::equal(same.begin(), same.end(), a.begin()));
  CHECK_THROWS_AS(supervised_edit(dict, a, "shape", from, "cube"), Error);
}

TEST_CASE("weighted reconstruction is exact on noise-free data") {
  const auto s = make_synthetic(300, 10, 0.0, 4);
  const auto dict = fit_supervised(NodeId::embed(0), s.activations, s.assignments, s.schema);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto w = reconstruct_weighted(dict, s.assignments[r], s.activations.row(r));
    CHECK(w.weights.size() == 3);
    for (std::size_t i = 0; i < 10; ++i) CHECK(std::abs(w.reconstruction[i] - s.activations(r, i)) < 1e-8);
  }
}

TEST_CASE("fitting rejects unobserved values and too little data") {
  auto s = make_synthetic(200, 6, 0.0, 5);
  s.schema.attributes[0].values.push_back("violet");
  CHECK_THROWS_AS(fit_supervised(NodeId::embed(0), s.activations, s.assignments, s.schema), Error);
  const auto tiny = make_synthetic(3, 6, 0.0, 6);
  CHECK_THROWS_AS(fit_supervised(NodeId::embed(0), tiny.activations, tiny.assignments, tiny.schema), Error);
}
