#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "factorize/compress.hpp"
#include "factorize/cost.hpp"
#include "ranksearch/search.hpp"
#include "support.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"

using namespace comcat;
using namespace comcat::ranksearch;
using testing::random_matrix;

namespace {

// Site storage written out independently of the cost module.
double brute_site_params(const ModelConfig& c, const SiteKey& s, std::size_t r) {
  switch (s.kind) {
    case SiteKey::Kind::kQK: return static_cast<double>(c.d_model * r + c.d_model * r);
    case SiteKey::Kind::kVO: return static_cast<double>(c.d_model * r + r * c.d_model);
    default: return static_cast<double>(c.d_model * r + r * c.ffn_dim);
  }
}

trainer::Dataset tiny_data(std::uint64_t seed) {
  trainer::DatasetSpec s;
  s.seed = seed;
  s.classes = 3;
  s.samples_per_class = 40;
  s.image_side = 8;
  return trainer::gen_dataset(s);
}

vit::VitModel trained_tiny(const trainer::Dataset& d) {
  vit::VitModel m = vit::init_model(testing::tiny_config(), 11);
  trainer::TrainConfig tc;
  tc.epochs = 30;
  tc.lr = 3e-3;
  tc.seed = 2;
  trainer::train(m, d.train, d.test, tc);
  return m;
}

std::vector<Matrix> random_noise(Rng& rng, std::span<const RankCandidates> cands) {
  std::vector<Matrix> out;
  for (const auto& c : cands) {
    Matrix g(1, c.ranks.size());
    for (double& v : g.data()) v = rng.gumbel();
    out.push_back(g);
  }
  return out;
}

}  // namespace

TEST_SUITE("ranksearch") {

TEST_CASE("candidate grids") {
  const ModelConfig c;
  CHECK(attention_grid(c) == std::vector<std::size_t>{4, 8, 12, 16, 24, 32});
  const auto f = ffn_grid(c);
  CHECK(f.size() == 6);
  CHECK(f.back() == 64);
  CHECK(std::is_sorted(f.begin(), f.end()));
  CHECK(std::adjacent_find(f.begin(), f.end()) == f.end());
  const auto cands = default_candidates(c);
  CHECK(cands.size() == factorize::all_sites(c).size());
  validate_candidates(c, cands);

  auto bad = cands;
  bad[0].ranks = {4};
  CHECK_THROWS_AS(validate_candidates(c, bad), ContractError);
  bad = cands;
  bad[0].ranks = {4, 65};
  CHECK_THROWS_AS(validate_candidates(c, bad), RankRangeError);
  bad = cands;
  bad.pop_back();
  CHECK_THROWS_AS(validate_candidates(c, bad), ContractError);
}

TEST_CASE("gumbel softmax") {
  const std::vector<double> zero(4, 0.0);
  for (double p : gumbel_softmax(zero, 0.7, zero)) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> alpha(5), noise(5);
    for (double& a : alpha) a = rng.normal();
    for (double& g : noise) g = rng.gumbel();
    const auto p = gumbel_softmax(alpha, 1.3, noise);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-12);
    const auto cold = gumbel_softmax(alpha, 1e-4, noise);
    std::size_t best = 0;
    for (std::size_t a = 1; a < 5; ++a)
      if (alpha[a] + noise[a] > alpha[best] + noise[best]) best = a;
    CHECK(cold[best] >= 1.0 - 1e-6);
  }
  CHECK(argmax_candidate(std::vector<double>{0.4, 0.4, 0.2}) == 0);
  CHECK(argmax_candidate(std::vector<double>{0.1, 0.45, 0.45}) == 1);
}

TEST_CASE("gumbel softmax node matches the direct form and its gradient") {
  Rng rng(2);
  autodiff::Tape t;
  const Matrix a = random_matrix(rng, 1, 6);
  Matrix g(1, 6);
  for (double& v : g.data()) v = rng.gumbel();
  const NodeId alpha = t.parameter("alpha", a);
  const NodeId p = gumbel_softmax_node(t, alpha, t.input(g), t.input(Matrix(1, 6, 1.0 / 0.8)));
  const auto direct = gumbel_softmax(a.data(), 0.8, g.data());
  for (std::size_t i = 0; i < 6; ++i) CHECK(t.value(p)(0, i) == doctest::Approx(direct[i]).epsilon(1e-14));
  const NodeId out = t.mean(t.matmul(p, t.input(random_matrix(rng, 6, 1))));
  CHECK(autodiff::grad_check(t, out, alpha, 1e-5) <= 1e-4);
}

TEST_CASE("expected cost") {
  const ModelConfig c;
  const std::vector<RankCandidates> one{{SiteKey{0, 0, SiteKey::Kind::kQK}, {1, 2}}};
  const std::vector<std::vector<double>> half{{0.5, 0.5}};
  CHECK(expected_cost(c, one, half) == 1.5 * 2 * c.d_model);

  const auto cands = default_candidates(c);
  std::vector<std::vector<double>> onehot;
  for (const auto& s : cands) {
    std::vector<double> p(s.ranks.size(), 0.0);
    p.back() = 1.0;
    onehot.push_back(p);
  }
  factorize::CompressionPlan max = factorize::CompressionPlan::maximal(c);
  for (const auto& s : cands) max.set_rank(s.site, s.max_rank());
  const auto cost = factorize::cost_count(c, max);
  CHECK(expected_cost(c, cands, onehot) == static_cast<double>(cost.mha_params + cost.ffn_params));
}

TEST_CASE("expected cost equals an enumeration over random probabilities") {
  const ModelConfig c;
  const auto cands = default_candidates(c);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::vector<double>> probs;
    double brute = 0.0;
    for (const auto& s : cands) {
      std::vector<double> alpha(s.ranks.size()), noise(s.ranks.size());
      for (double& a : alpha) a = rng.normal();
      for (double& g : noise) g = rng.gumbel();
      probs.push_back(gumbel_softmax(alpha, 2.0, noise));
      for (std::size_t a = 0; a < s.ranks.size(); ++a) brute += probs.back()[a] * brute_site_params(c, s.site, s.ranks[a]);
    }
    CHECK(expected_cost(c, cands, probs) == doctest::Approx(brute).epsilon(1e-13));
  }
}

TEST_CASE("search loss") {
  CHECK(l_prob(0.7, 100.0, 100.0, 1.5) == 0.7);
  CHECK(l_prob(0.7, 300.0, 100.0, 0.0) == 0.7);
  CHECK(l_prob(0.5, 200.0, 100.0, 1.5) == doctest::Approx(1.4142135623730951).epsilon(1e-15));
  CHECK(l_prob_hinge(0.5, 200.0, 100.0, 1.5, true) == l_prob(0.5, 200.0, 100.0, 1.5));
  CHECK(l_prob_hinge(0.5, 200.0, 100.0, 1.5, false) == 0.5);
  CHECK(parse_penalty(penalty_name(BudgetPenalty::kHinge)) == BudgetPenalty::kHinge);
  CHECK(parse_penalty(penalty_name(BudgetPenalty::kRatio)) == BudgetPenalty::kRatio);
  CHECK(parse_weight_update(weight_update_name(WeightUpdate::kMixture)) == WeightUpdate::kMixture);
  CHECK_THROWS(parse_penalty("linear"));
}

TEST_CASE("cumulative indicator") {
  const Matrix c = cumulative_indicator(std::vector<std::size_t>{1, 3, 4});
  CHECK(c == Matrix::from_rows({{1, 0, 0, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}}));
}

TEST_CASE("rank mixtures") {
  Rng rng(4);
  const std::vector<std::size_t> ranks{2, 3, 5};
  const Matrix xv = random_matrix(rng, 4, 6), uv = random_matrix(rng, 6, 5), sv = random_matrix(rng, 5, 7);

  SUBCASE("one-hot probabilities give the plain truncation") {
    for (std::size_t a = 0; a < ranks.size(); ++a) {
      autodiff::Tape t;
      Matrix p(1, 3);
      p(0, a) = 1.0;
      const NodeId y = mixture_forward(t, t.input(xv), t.input(uv), t.input(sv), t.input(p), ranks);
      const Matrix plain = matmul(matmul(xv, uv.col_block(0, ranks[a])), sv.row_block(0, ranks[a]));
      CHECK(max_abs_diff(t.value(y), plain) <= 1e-13);
    }
  }
  SUBCASE("equal weights average the truncations") {
    autodiff::Tape t;
    const std::vector<std::size_t> two{2, 5};
    const NodeId y =
        mixture_forward(t, t.input(xv), t.input(uv), t.input(sv), t.input(Matrix::from_rows({{0.5, 0.5}})), two);
    const Matrix low = matmul(matmul(xv, uv.col_block(0, 2)), sv.row_block(0, 2));
    const Matrix high = matmul(matmul(xv, uv), sv);
    CHECK(max_abs_diff(t.value(y), scale(add(low, high), 0.5)) <= 1e-13);
  }
  SUBCASE("mask route equals the literal weighted sum, values and gradients") {
    autodiff::Tape t;
    const NodeId x = t.input(xv);
    const NodeId u = t.parameter("u", uv);
    const NodeId s = t.parameter("s", sv);
    const NodeId alpha = t.parameter("alpha", random_matrix(rng, 1, 3));
    Matrix g(1, 3);
    for (double& v : g.data()) v = rng.gumbel();
    const NodeId p = gumbel_softmax_node(t, alpha, t.input(g), t.input(Matrix(1, 3, 1.0 / 1.5)));
    const NodeId fast = mixture_forward(t, x, u, s, p, ranks);
    const NodeId slow = mixture_forward_reference(t, x, u, s, p, ranks);
    CHECK(max_abs_diff(t.value(fast), t.value(slow)) <= 1e-12);

    const NodeId r = t.input(random_matrix(rng, 7, 1));
    const NodeId lf = t.mean(t.matmul(fast, r));
    const NodeId ls = t.mean(t.matmul(slow, r));
    for (NodeId param : {u, s, alpha}) {
      CHECK(autodiff::grad_check(t, lf, param, 1e-5) <= 1e-4);
      t.backward(lf);
      const Matrix gf = t.grad(param);
      t.backward(ls);
      CHECK(max_abs_diff(gf, t.grad(param)) <= 1e-12);
    }
  }
}

TEST_CASE("full search loss passes a finite-difference check") {
  Rng rng(5);
  const ModelConfig c = testing::tiny_config();
  const auto cands = default_candidates(c);
  const vit::VitModel dense = vit::init_model(c, 7);
  factorize::CompressionPlan plan = factorize::CompressionPlan::maximal(c);
  for (const auto& s : cands) plan.set_rank(s.site, s.max_rank());
  const vit::VitModel search_model = factorize::compress_model(dense, plan).model;
  std::vector<Matrix> alpha;
  for (const auto& s : cands) alpha.push_back(random_matrix(rng, 1, s.ranks.size(), 0.5));

  for (double beta : {1.5, 0.5}) {
    SearchConfig cfg;
    cfg.eps = 600.0;
    cfg.beta = beta;
    ProbGraph pg = build_prob_graph(search_model, cands, alpha, cfg);
    autodiff::Tape& t = pg.graph->tape();
    bind_prob_inputs(t, pg.nodes, 1.7, random_noise(rng, cands), true);
    pg.graph->bind(random_matrix(rng, c.image_side, c.image_side), 1);
    const double ce = t.forward(pg.graph->cross_entropy())(0, 0);
    const double expected = t.forward(pg.nodes.expected)(0, 0);
    CHECK(t.forward(pg.nodes.loss)(0, 0) == doctest::Approx(l_prob(ce, expected, cfg.eps, beta)).epsilon(1e-13));
    for (std::size_t j = 0; j < cands.size(); ++j) {
      CAPTURE(cands[j].site.id());
      CHECK(autodiff::grad_check(t, pg.nodes.loss, pg.nodes.alpha[j], 1e-5) <= 1e-4);
    }
    bind_prob_inputs(t, pg.nodes, 1.7, random_noise(rng, cands), false);
    CHECK(t.forward(pg.nodes.loss)(0, 0) == doctest::Approx(t.forward(pg.graph->cross_entropy())(0, 0)).epsilon(1e-15));
    CHECK(autodiff::grad_check(t, pg.nodes.loss, pg.nodes.alpha[0], 1e-5) <= 1e-4);
  }
}

TEST_CASE("truncating the search model equals compressing at those ranks") {
  Rng rng(6);
  const ModelConfig c = testing::tiny_config();
  const auto cands = default_candidates(c);
  const vit::VitModel dense = vit::init_model(c, 8);
  factorize::CompressionPlan max = factorize::CompressionPlan::maximal(c);
  for (const auto& s : cands) max.set_rank(s.site, s.max_rank());
  const vit::VitModel search_model = factorize::compress_model(dense, max).model;
  std::vector<std::size_t> ranks;
  factorize::CompressionPlan plan = max;
  for (const auto& s : cands) {
    ranks.push_back(s.ranks[rng.below(s.ranks.size())]);
    plan.set_rank(s.site, ranks.back());
  }
  const vit::VitModel a = truncate_model(search_model, cands, ranks);
  const vit::VitModel b = factorize::compress_model(dense, plan).model;
  const Matrix img = random_matrix(rng, c.image_side, c.image_side);
  CHECK(max_abs_diff(vit::forward_one(a, img), vit::forward_one(b, img)) <= 1e-10);
  CHECK(factorize::model_plan(a) == plan);
}

TEST_CASE("uniform plan for a budget") {
  const ModelConfig c;
  const double dense = static_cast<double>(dense_site_params(c));
  CHECK(dense == 131072.0);
  for (double f : {0.3, 0.5, 0.8}) {
    const auto plan = uniform_plan_for_budget(c, f * dense);
    const auto cost = factorize::cost_count(c, plan);
    CHECK(static_cast<double>(cost.mha_params + cost.ffn_params) <= f * dense);
    CHECK(plan.blocks[0].qk[0] == plan.blocks[3].qk[3]);
  }
}

TEST_CASE("an infeasible budget names the minimum") {
  const trainer::Dataset d = tiny_data(1);
  const ModelConfig c = testing::tiny_config();
  const vit::VitModel m = vit::init_model(c, 1);
  SearchConfig cfg;
  const auto cands = default_candidates(c);
  const double minimum = static_cast<double>(minimum_params(c, cands));
  cfg.eps = minimum - 1.0;
  try {
    SearchSession s(m, d.train, d.test, cfg);
    FAIL("expected a budget error");
  } catch (const BudgetError& e) {
    CHECK(e.minimum() == minimum);
    CHECK(std::string(e.what()).find(std::to_string(static_cast<std::uint64_t>(minimum))) != std::string::npos);
  }
  cfg.eps = 0.0;
  CHECK_THROWS_AS(SearchSession(m, d.train, d.test, cfg), ContractError);
}

TEST_CASE("an unconstrained budget holds the initial plan") {
  const trainer::Dataset d = tiny_data(2);
  const vit::VitModel dense = trained_tiny(d);
  const ModelConfig& c = dense.config;
  SearchConfig cfg;
  cfg.eps = static_cast<double>(dense_site_params(c)) * 4;
  cfg.rounds = 4;
  cfg.prob_steps = 20;
  cfg.weight_steps = 0;
  cfg.seed = 3;
  SearchSession s(dense, d.train, d.test, cfg);
  const auto initial = s.argmax_plan();
  const auto alpha = s.alpha();
  for (int i = 0; i < 4; ++i) s.round();
  CHECK(s.argmax_plan() == initial);
  CHECK(s.alpha() == alpha);

  cfg.penalty = BudgetPenalty::kRatio;
  SearchSession ratio(dense, d.train, d.test, cfg);
  ratio.round();
  CHECK_FALSE(ratio.alpha() == alpha);
}

TEST_CASE("search recovers a planted rank") {
  ModelConfig c;
  c.d_model = 8;
  c.heads = 1;
  c.blocks = 1;
  c.ffn_dim = 12;
  c.classes = 3;
  c.image_side = 8;
  c.patch_side = 4;
  vit::VitModel m = vit::init_model(c, 5);
  Rng rng(7);
  m.blocks[0].mha.heads[0].wq = testing::planted_rank(rng, 8, 8, 2);
  const trainer::Dataset d = tiny_data(3);

  const SiteKey qk{0, 0, SiteKey::Kind::kQK};
  std::vector<RankCandidates> cands{{qk, {2, 8}},
                                    {SiteKey{0, 0, SiteKey::Kind::kVO}, {7, 8}},
                                    {SiteKey{0, 0, SiteKey::Kind::kFfn1}, {7, 8}},
                                    {SiteKey{0, 0, SiteKey::Kind::kFfn2}, {7, 8}}};
  // Only dropping QK to its planted rank can meet this budget.
  const double eps = brute_site_params(c, qk, 2) + brute_site_params(c, cands[1].site, 8) +
                     2 * brute_site_params(c, cands[2].site, 8);
  SearchConfig cfg;
  cfg.eps = eps;
  cfg.rounds = 5;
  cfg.prob_steps = 40;
  cfg.weight_steps = 0;
  cfg.seed = 4;
  SearchSession s(m, d.train, d.test, cfg, cands);
  for (int i = 0; i < 5; ++i) s.round();
  CHECK(s.argmax_plan().rank(qk) == 2);
  CHECK(static_cast<double>(s.argmax_params()) <= eps);
}

TEST_CASE("search is a pure function of its seed") {
  const trainer::Dataset d = tiny_data(4);
  const vit::VitModel dense = vit::init_model(testing::tiny_config(), 9);
  SearchConfig cfg;
  cfg.eps = 0.5 * static_cast<double>(dense_site_params(dense.config));
  cfg.rounds = 2;
  cfg.prob_steps = 6;
  cfg.weight_steps = 4;
  cfg.seed = 5;
  const SearchResult a = run_search(dense, d.train, d.test, cfg);
  const SearchResult b = run_search(dense, d.train, d.test, cfg);
  CHECK(a.plan == b.plan);
  CHECK(a.alpha == b.alpha);
  REQUIRE(a.trace.size() == 4);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].ce == b.trace[i].ce);
    CHECK(a.trace[i].expected_params == b.trace[i].expected_params);
    CHECK(a.trace[i].argmax_params == b.trace[i].argmax_params);
  }
  CHECK(a.trace[0].phase == "prob");
  CHECK(a.trace[1].phase == "weight");
  CHECK(factorize::model_plan(a.model) == a.plan);
}

}  // TEST_SUITE
