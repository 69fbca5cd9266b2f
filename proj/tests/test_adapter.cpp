#include <cstring>

#include "doctest.h"

#include "adapter/adapter.hpp"
#include "factorize/compress.hpp"
#include "io/container.hpp"
#include "linalg/svd.hpp"
#include "support.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"

using namespace comcat;
using namespace comcat::adapter;
using testing::random_matrix;
using testing::TempDir;

namespace {

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

AdapterWeights random_adapter(const ModelConfig& c, std::size_t rank, std::uint64_t seed) {
  return init_adapter(c, rank, seed, AdapterInit{.stddev = 0.3, .random_second = true});
}

}  // namespace

TEST_SUITE("adapter") {

TEST_CASE("zero second factors reproduce the frozen attention bit for bit") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const vit::MhaWeights w = testing::random_mha(rng, 8, 2);
    const AdapterWeights a = init_adapter(testing::tiny_config(), 3, static_cast<std::uint64_t>(trial));
    const Matrix x = random_matrix(rng, 5, 8);
    CHECK(bitwise_equal(adapter_forward(x, x, x, w, a.blocks[0]), vit::mha_combined(x, x, x, w)));
  }
  const vit::VitModel m = vit::init_model(testing::tiny_config(), 2);
  vit::VitModel combined = m;
  vit::set_form(combined, vit::MhaForm::kCombined);
  const AdapterWeights a = init_adapter(m.config, 2, 5);
  const Matrix img = random_matrix(rng, 8, 8);
  CHECK(bitwise_equal(adapted_forward_one(m, a, img), vit::forward_one(combined, img)));
  CHECK(max_abs_diff(adapted_forward_one(m, a, img), vit::forward_one(m, img)) <= 1e-12);
}

TEST_CASE("a zero base with full-rank factors reproduces the original head") {
  Rng rng(2);
  const vit::MhaWeights w = testing::random_mha(rng, 8, 2);
  vit::MhaWeights zero = w;
  std::vector<AdapterHead> heads;
  for (auto& h : zero.heads) {
    const Matrix qk = matmul_nt(h.wq, h.wk);
    const Matrix vo = matmul(h.wv, h.wo);
    const auto fqk = linalg::truncated_factor(qk, 8);
    const auto fvo = linalg::truncated_factor(vo, 8);
    heads.push_back(AdapterHead{fqk.u, fqk.s.transpose(), fvo.u, fvo.s});
    h.wq.fill(0.0);
    h.wk.fill(0.0);
    h.wv.fill(0.0);
    h.wo.fill(0.0);
  }
  const Matrix x = random_matrix(rng, 6, 8);
  CHECK(max_abs_diff(adapter_forward(x, x, x, zero, heads), vit::mha_combined(x, x, x, w)) <= 1e-8);
}

TEST_CASE("adapter graph matches the direct forward and its gradients") {
  Rng rng(3);
  const vit::VitModel m = vit::init_model(testing::tiny_config(), 3);
  const AdapterWeights a = random_adapter(m.config, 2, 4);
  auto g = adapter_graph(m, a);
  const Matrix img = random_matrix(rng, 8, 8);
  g->bind(img, 1);
  vit::Tape& t = g->tape();
  CHECK(max_abs_diff(t.forward(g->logits()), adapted_forward_one(m, a, img)) <= 1e-12);
  for (const char* name : {"uq", "sk", "uv", "so"})
    for (std::size_t b = 0; b < m.config.blocks; ++b) {
      const std::string full = "adapter.blocks." + std::to_string(b) + ".attn.1." + name;
      CAPTURE(full);
      CHECK(autodiff::grad_check(t, g->cross_entropy(), *t.find_parameter(full), 1e-5) <= 1e-4);
    }
}

TEST_CASE("initialization") {
  const ModelConfig c = testing::tiny_config();
  const AdapterWeights a = init_adapter(c, 3, 1);
  const AdapterWeights b = init_adapter(c, 3, 2);
  CHECK_FALSE(a.blocks[0][0].uq == b.blocks[0][0].uq);
  CHECK(a.blocks[0][0].sk == b.blocks[0][0].sk);
  CHECK(a.blocks[1][1].so == Matrix(3, c.d_model));
  CHECK(a.blocks[1][1].uv.rows() == c.d_model);
  CHECK(a.parameter_count() == c.blocks * c.heads * 4 * c.d_model * 3);
  CHECK(init_adapter(ModelConfig{}, 4, 1).parameter_count() == 16384);
  CHECK_THROWS_AS(init_adapter(c, 0, 1), RankRangeError);
}

TEST_CASE("adaptation trains only the factors") {
  trainer::DatasetSpec spec;
  spec.classes = 3;
  spec.samples_per_class = 30;
  spec.image_side = 8;
  spec.seed = 4;
  const trainer::Dataset d = trainer::gen_dataset(spec);
  const vit::VitModel base = vit::init_model(testing::tiny_config(), 6);
  const auto task = customization_set(d.train, 2);

  AdaptConfig cfg;
  cfg.rank = 2;
  cfg.steps = 0;
  const AdaptResult none = adapt(base, task, cfg);
  CHECK(none.initial_loss == none.final_loss);
  CHECK(none.adapter.blocks[0][0].uq == init_adapter(base.config, 2, cfg.seed).blocks[0][0].uq);

  cfg.steps = 30;
  cfg.lr = 3e-2;
  const AdaptResult r = adapt(base, task, cfg);
  CHECK(r.loss_curve.size() == 30);
  CHECK(r.final_loss < r.initial_loss);
  const AdaptResult again = adapt(base, task, cfg);
  CHECK(again.adapter.blocks[1][0].so == r.adapter.blocks[1][0].so);
  CHECK(again.loss_curve == r.loss_curve);

  const vit::VitModel low =
      factorize::compress_model(base, factorize::CompressionPlan::uniform(base.config, 2, 2)).model;
  CHECK_THROWS_AS(adapt(low, task, cfg), ContractError);
}

TEST_CASE("customization set") {
  trainer::DatasetSpec spec;
  spec.classes = 4;
  spec.samples_per_class = 20;
  spec.image_side = 8;
  const trainer::Dataset d = trainer::gen_dataset(spec);
  const auto task = customization_set(d.train, 3);
  std::size_t held = 0;
  std::vector<std::size_t> other(4);
  for (const auto& s : task) {
    held += s.label == 3;
    ++other[s.label];
  }
  CHECK(held == 16);
  CHECK(task.size() == 32);
  CHECK(other[0] + other[1] + other[2] == 16);
  CHECK(other[0] >= 5);
  CHECK(other[2] >= 5);
  CHECK_THROWS_AS(customization_set(d.train, 9), ContractError);
}

TEST_CASE("adapter files are bound to their base") {
  TempDir dir("adapter");
  const vit::VitModel base = vit::init_model(testing::tiny_config(), 7);
  const std::string sha = io::write_model(dir / "base.cmct", base);
  const AdapterWeights a = random_adapter(base.config, 2, 8);
  write_adapter(dir / "a.cmct", base.config, a, sha);
  const AdapterWeights back = read_adapter(dir / "a.cmct", sha);
  CHECK(back.rank == 2);
  CHECK(back.blocks[1][1].so == a.blocks[1][1].so);
  CHECK(back.blocks[0][1].uq == a.blocks[0][1].uq);
  CHECK(back.parameter_count() == a.parameter_count());

  std::string other = sha;
  other[0] = other[0] == '0' ? '1' : '0';
  try {
    read_adapter(dir / "a.cmct", other);
    FAIL("expected a checksum mismatch");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
  CHECK_THROWS_AS(read_adapter(dir / "base.cmct", sha), ParseError);
  CHECK(std::filesystem::file_size(dir / "a.cmct") < std::filesystem::file_size(dir / "base.cmct"));
}

}  // TEST_SUITE
