#include <doctest.h>

#include "helpers.hpp"
#include "sage/error.hpp"
#include "sage/projection.hpp"

using namespace sage;
using namespace sage::testing;

TEST_CASE("a head output in the span of selected features is reconstructed exactly") {
  Rng rng(1);
  int covered = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto sae = random_sae(16, 48, rng);
    const auto x = random_vector(16, rng);
    const auto probe = project_sublayer(sae, x, Vector(16, 0.0), -1e300);
    if (probe.active.size() < 3) continue;
    Vector h(16, 0.0);
    std::vector<std::size_t> chosen{probe.active[0], probe.active[1], probe.active[2]};
    for (std::size_t j : chosen) axpy(1.0 + static_cast<double>(j % 3), sae.feature(j), h);
    const auto p = project_sublayer(sae, x, h);
    const bool in_span = std::all_of(chosen.begin(), chosen.end(), [&](std::size_t j) {
      return std::find(p.selected.begin(), p.selected.end(), j) != p.selected.end();
    });
    if (!in_span) continue;
    ++covered;
    CHECK(norm(sub(p.reconstruction, h)) < 1e-8);
  }
  CHECK(covered >= 20);
}

TEST_CASE("fixed threshold below every alignment selects the whole active set") {
  Rng rng(2);
  const auto sae = random_sae(8, 20, rng);
  const auto x = random_vector(8, rng);
  const auto h = random_vector(8, rng);
  const auto p = project_sublayer(sae, x, h, -1e300);
  CHECK(p.selected == p.active);
  CHECK(p.alignment.size() == p.active.size());
  const auto q = project_sublayer(sae, x, h);
  CHECK(q.selected.size() <= p.selected.size());
  for (std::size_t k = 0; k < q.active.size(); ++k) {
    const bool sel = std::find(q.selected.begin(), q.selected.end(), q.active[k]) != q.selected.end();
    double mean = 0.0;
    for (double a : q.alignment) mean += a;
    mean /= static_cast<double>(q.alignment.size());
    CHECK(sel == (q.alignment[k] >= mean));
  }
}

TEST_CASE("an empty active set yields the flagged zero reconstruction") {
  Rng rng(3);
  auto sae = random_sae(8, 12, rng);
  for (auto& b : sae.b_enc) b = -1e6;
  const auto p = project_sublayer(sae, random_vector(8, rng), random_vector(8, rng));
  CHECK(p.empty);
  CHECK(p.active.empty());
  CHECK(p.reconstruction == Vector(8, 0.0));
}

TEST_CASE("cross-section reconstruction reads the SAE's residual layer") {
  const auto cfg = small_config(2, 2, 16, 8);
  const Model m(ModelWeights::init(cfg));
  Rng rng(4);
  const auto run = m.forward(random_tokens(5, cfg.vocab_size, rng));
  const auto sae = random_sae(16, 40, rng, 1);
  ProjectionResult detail;
  const NodeId n = NodeId::head_out(0, 1, 4);
  const auto r = reconstruct_cross_section(sae, run.cache, n, &detail);
  const auto direct = project_sublayer(sae, run.cache.at(NodeId::resid_post(1, 4)), run.cache.at(n));
  CHECK(r == direct.reconstruction);
  const auto early = random_sae(16, 40, rng, 0);
  CHECK_THROWS_AS(reconstruct_cross_section(early, run.cache, NodeId::head_out(1, 0, 4)), Error);
  const auto resid = reconstruct_cross_section(sae, run.cache, NodeId::resid_post(1, 2));
  CHECK(resid == sae.decode(sae.encode(run.cache.at(NodeId::resid_post(1, 2)))));
}
