#include <cmath>
#include <string>

#include "doctest.h"

#include "factorize/compress.hpp"
#include "factorize/cost.hpp"
#include "factorize/plan.hpp"
#include "factorize/spectra.hpp"
#include "linalg/svd.hpp"
#include "support.hpp"
#include "util/error.hpp"

using namespace comcat;
using namespace comcat::factorize;
using testing::random_matrix;

namespace {

std::uint64_t stored_parameters(const VitModel& m) {
  std::uint64_t n = 0;
  vit::visit_tensors(m, [&](const std::string&, const Matrix& t) { n += t.size(); });
  return n;
}

std::uint64_t counted_flops(const VitModel& m, const Matrix& image) {
  linalg::mac_counter() = 0;
  vit::forward_one(m, image);
  return 2 * linalg::mac_counter();
}

CompressionPlan random_plan(Rng& rng, const vit::ModelConfig& c) {
  CompressionPlan p = CompressionPlan::maximal(c);
  for (const SiteKey& s : all_sites(c)) p.set_rank(s, 1 + rng.below(max_site_rank(c, s.kind)));
  for (auto& bp : p.blocks) {
    if (rng.below(3) == 0) bp.ffn1.reset();
    if (rng.below(3) == 0) bp.ffn2.reset();
  }
  return p;
}

Matrix orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols) {
  return linalg::svd(random_matrix(rng, rows, cols)).u;
}

}  // namespace

TEST_SUITE("factorize") {

TEST_CASE("combined matrices of one head") {
  Rng rng(1);
  MhaWeights w = testing::random_mha(rng, 8, 2);
  Matrix padded(8, 4);
  for (std::size_t i = 0; i < 4; ++i) padded(i, i) = 1.0;
  w.heads[0].wq = padded;
  w.heads[0].wk = padded;
  const HeadProducts p = combine_head(w, 0);
  Matrix projector(8, 8);
  for (std::size_t i = 0; i < 4; ++i) projector(i, i) = 1.0;
  CHECK(p.qk == projector);

  w.heads[1].wv.fill(0.0);
  CHECK(combine_head(w, 1).vo == Matrix(8, 8));
  CHECK_THROWS(combine_head(w, 2));
}

TEST_CASE("combined matrices have rank at most the head dimension") {
  Rng rng(2);
  const MhaWeights w = testing::random_mha(rng, 8, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(linalg::numerical_rank(combine_head(w, i).qk, 1e-10) <= 2);
    CHECK(linalg::numerical_rank(combine_head(w, i).vo, 1e-10) <= 2);
  }
}

TEST_CASE("truncation at the head dimension is exact") {
  Rng rng(3);
  const MhaWeights w = testing::random_mha(rng, 16, 4);
  const LowRankMhaWeights low = compress_mha(w, 4, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const HeadProducts p = combine_head(w, i);
    CHECK(max_abs_diff(matmul_nt(low.heads[i].uq, low.heads[i].sk), p.qk) <= 1e-9);
    CHECK(max_abs_diff(matmul(low.heads[i].uv, low.heads[i].so), p.vo) <= 1e-9);
  }
  const LowRankMhaWeights one = compress_mha(w, 1, 1);
  for (const auto& hd : one.heads) CHECK(hd.uq.size() + hd.sk.size() + hd.uv.size() + hd.so.size() == 4 * 16);
  CHECK_THROWS_AS(compress_mha(w, 0, 1), RankRangeError);
  CHECK_THROWS_AS(compress_mha(w, 1, 17), RankRangeError);
}

TEST_CASE("matrix-level baseline") {
  Rng rng(4);
  const vit::ModelConfig c = testing::tiny_config();
  const MhaWeights w = testing::random_mha(rng, c.d_model, c.heads);
  const std::size_t d = c.head_dim();

  const MatrixLevelMha full = compress_matrix_level(w, matrix_level_params(c, d));
  CHECK(full.rank == d);
  const Matrix x = random_matrix(rng, 5, c.d_model);
  CHECK(max_abs_diff(vit::mha_standard(x, x, x, full.expand()), vit::mha_standard(x, x, x, w)) <= 1e-10);

  const MatrixLevelMha half = compress_matrix_level(w, matrix_level_params(c, 2) + 1);
  CHECK(half.rank == 2);
  CHECK(half.parameter_count() == matrix_level_params(c, 2));
  // Four factored matrices per head against two combined sites.
  CHECK(half.heads.size() == c.heads);
  CHECK(all_sites(c).size() == c.blocks * (2 * c.heads + 2));

  CHECK_THROWS_AS(compress_matrix_level(w, matrix_level_params(c, 1) - 1), BudgetError);
}

TEST_CASE("FFN compression") {
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel m = vit::init_model(c, 1);
  const FfnWeights& f = m.blocks[0].ffn;
  const FfnWeights full = compress_ffn(f, 8);
  CHECK(max_abs_diff(vit::linear_product(full.w1), vit::linear_product(f.w1)) <= 1e-9);
  CHECK(max_abs_diff(vit::linear_product(full.w2), vit::linear_product(f.w2)) <= 1e-9);
  const FfnWeights one = compress_ffn(f, 1);
  CHECK(vit::linear_parameter_count(one.w1) == 1 * (8 + 12));
  CHECK(vit::linear_parameter_count(one.w2) == 1 * (8 + 12));
  CHECK_THROWS_AS(compress_ffn(f, 9), RankRangeError);
}

TEST_CASE("plans") {
  const vit::ModelConfig c = testing::tiny_config();
  const CompressionPlan max = CompressionPlan::maximal(c);
  CHECK(max.invalid_sites(c).empty());
  CHECK(max.blocks[0].qk == std::vector<std::size_t>{8, 8});
  CHECK(max.blocks[0].ffn1 == std::optional<std::size_t>(8));
  CHECK(CompressionPlan::from_site_map(c, max.to_site_map()) == max);

  CompressionPlan bad = CompressionPlan::uniform(c, 2, 2);
  bad.blocks[1].vo[1] = 9;
  bad.blocks[0].qk[0] = 0;
  const auto sites = bad.invalid_sites(c);
  REQUIRE(sites.size() == 2);
  CHECK(sites[0].starts_with("b0.h0.qk (rank 0"));
  CHECK(sites[1].starts_with("b1.h1.vo (rank 9"));
  try {
    bad.validate(c);
    FAIL("expected a rank error");
  } catch (const RankRangeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("b0.h0.qk") != std::string::npos);
    CHECK(msg.find("b1.h1.vo") != std::string::npos);
  }
  const VitModel m = vit::init_model(c, 1);
  CHECK_THROWS_AS(compress_model(m, bad), RankRangeError);
}

TEST_CASE("closed-form cost examples") {
  vit::ModelConfig c;
  const CompressionPlan eight = CompressionPlan::uniform(c, 8, 8);
  CHECK(cost_count(c, eight).mha_params == c.blocks * 8192);
  CHECK(cost_count(c).mha_params == c.blocks * 16384);
  // Parity with dense storage comes at the head dimension; at r = d_model
  // every head alone stores 4 d_model^2.
  CHECK(cost_count(c, CompressionPlan::uniform(c, 16, 16)).mha_params == cost_count(c).mha_params);
  CHECK(cost_count(c, CompressionPlan::uniform(c, 64, 64)).mha_params == c.blocks * c.heads * 4 * 64 * 64);

  const VitModel m = vit::init_model(c, 1);
  CHECK(cost_count(c).params == stored_parameters(m));
  CHECK(cost_count(c).params == 135818);
}

TEST_CASE("cost matches enumeration of stored weights and counted multiplies") {
  Rng rng(5);
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel dense = vit::init_model(c, 2);
  const Matrix image = random_matrix(rng, c.image_side, c.image_side);
  CHECK(cost_count(c).params == stored_parameters(dense));
  CHECK(cost_count(c).flops == counted_flops(dense, image));
  CHECK(model_cost(dense) == cost_count(c));
  for (int trial = 0; trial < 10; ++trial) {
    const CompressionPlan p = random_plan(rng, c);
    const VitModel low = compress_model(dense, p).model;
    const Cost cost = cost_count(c, p);
    CHECK(cost.params == stored_parameters(low));
    CHECK(cost.flops == counted_flops(low, image));
    CHECK(model_cost(low) == cost);
    CHECK(model_plan(low) == p);
  }
  CHECK_FALSE(model_plan(dense).has_value());
}

TEST_CASE("compression at maximal ranks is lossless") {
  Rng rng(6);
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel dense = vit::init_model(c, 3);
  const CompressedModel out = compress_model(dense, CompressionPlan::maximal(c));
  for (int i = 0; i < 5; ++i) {
    const Matrix img = random_matrix(rng, c.image_side, c.image_side);
    CHECK(max_abs_diff(vit::forward_one(dense, img), vit::forward_one(out.model, img)) <= 1e-8);
  }
  CHECK(out.report.after == cost_count(c, CompressionPlan::maximal(c)));
  CHECK(out.report.before == cost_count(c));
  for (const auto& [site, err] : out.report.site_error) {
    CAPTURE(site);
    CHECK(err <= 1e-12);
  }
}

TEST_CASE("halving every rank gives the closed-form count") {
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel dense = vit::init_model(c, 4);
  CompressionPlan half = CompressionPlan::maximal(c);
  for (const SiteKey& s : all_sites(c)) half.set_rank(s, half.rank(s) / 2);
  const CompressedModel out = compress_model(dense, half);
  const std::uint64_t attention = c.blocks * c.heads * (2 * c.d_model * 4 + 2 * c.d_model * 4);
  const std::uint64_t ffn = c.blocks * 2 * 4 * (c.d_model + c.ffn_dim);
  CHECK(out.report.after.mha_params == attention);
  CHECK(out.report.after.ffn_params == ffn);
  CHECK(out.report.after.params == cost_count(c).params - cost_count(c).mha_params - cost_count(c).ffn_params +
                                       attention + ffn);
}

TEST_CASE("re-compressing a low-rank model re-factorizes its effective matrices") {
  Rng rng(7);
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel dense = vit::init_model(c, 5);
  const VitModel mid = compress_model(dense, CompressionPlan::uniform(c, 6, 6, 6)).model;
  const VitModel again = compress_model(mid, CompressionPlan::uniform(c, 6, 6, 6)).model;
  const Matrix img = random_matrix(rng, c.image_side, c.image_side);
  CHECK(max_abs_diff(vit::forward_one(mid, img), vit::forward_one(again, img)) <= 1e-10);
  const HeadProducts e = effective_head(mid.blocks[1], 1);
  CHECK(linalg::numerical_rank(e.qk, 1e-10) <= 6);
}

TEST_CASE("spectra of a model") {
  const vit::ModelConfig c = testing::tiny_config();
  const VitModel m = vit::init_model(c, 6);
  const SpectrumReport r = analyze_spectra(m, 0.9);
  // Q, K, V, O and the two combined matrices per head, two FFN matrices per block.
  CHECK(r.sites.size() == c.blocks * (6 * c.heads + 2));
  CHECK(r.heads.size() == c.blocks * c.heads);
  for (const auto& s : r.sites) {
    CAPTURE(s.site);
    for (std::size_t i = 1; i < s.cumulative.size(); ++i) CHECK(s.cumulative[i] >= s.cumulative[i - 1]);
    CHECK(s.cumulative.back() == 1.0);
  }
  VitModel low = compress_model(m, CompressionPlan::maximal(c)).model;
  CHECK_THROWS(analyze_spectra(low, 0.9));
}

TEST_CASE("flat and planted spectra") {
  Rng rng(7);
  vit::ModelConfig c;
  c.blocks = 1;
  VitModel m = vit::init_model(c, 7);
  const std::size_t d = c.head_dim();
  for (auto& hw : m.blocks[0].mha.heads) {
    hw.wq = orthonormal_columns(rng, c.d_model, d);
    hw.wk = orthonormal_columns(rng, c.d_model, d);
  }
  // Head 1: both projections of rank 2.
  auto& planted = m.blocks[0].mha.heads[1];
  planted.wq = testing::planted_rank(rng, c.d_model, d, 2);
  planted.wk = testing::planted_rank(rng, c.d_model, d, 2);
  const SpectrumReport r = analyze_spectra(m, 0.9);
  for (const auto& s : r.sites) {
    if (s.layer != 0) continue;
    if (s.head == 0 && s.site == "Q") {
      CHECK(s.sigma.front() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(s.sigma.back() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(s.rank_at_tau == 15);  // ceil(0.9 * 16)
    }
    if (s.head == 1 && (s.site == "Q" || s.site == "K" || s.site == "QK")) CHECK(s.rank_at_tau <= 2);
  }
  const HeadEfficiency& h1 = r.heads[1];
  CHECK(h1.qk_combined <= 2 * 2 * c.d_model);
}

}  // TEST_SUITE
