#include <cmath>
#include <cstdlib>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "support.hpp"
#include "trainer/dataset.hpp"
#include "trainer/engine.hpp"
#include "trainer/optim.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"

using namespace comcat;
using namespace comcat::trainer;
using testing::random_matrix;

namespace {

DatasetSpec tiny_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.seed = seed;
  s.classes = 3;
  s.samples_per_class = 40;
  s.image_side = 8;
  return s;
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].label != b[i].label ||
        std::memcmp(a[i].image.data().data(), b[i].image.data().data(), a[i].image.size() * sizeof(double)))
      return false;
  return true;
}

bool same_weights(const vit::VitModel& a, const vit::VitModel& b) {
  std::vector<Matrix> ta, tb;
  vit::visit_tensors(a, [&](const std::string&, const Matrix& m) { ta.push_back(m); });
  vit::visit_tensors(b, [&](const std::string&, const Matrix& m) { tb.push_back(m); });
  return ta == tb;
}

double correlation(const Matrix& a, const Matrix& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.data()[i];
    mb += b.data()[i];
  }
  ma /= a.size();
  mb /= b.size();
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i] - ma, y = b.data()[i] - mb;
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  return ab / std::sqrt(aa * bb);
}

// Scoped COMCAT_THREADS override.
class ThreadsEnv {
 public:
  explicit ThreadsEnv(const char* value) {
    if (const char* old = std::getenv("COMCAT_THREADS")) saved_ = old;
    setenv("COMCAT_THREADS", value, 1);
  }
  ~ThreadsEnv() {
    if (saved_.empty())
      unsetenv("COMCAT_THREADS");
    else
      setenv("COMCAT_THREADS", saved_.c_str(), 1);
  }

 private:
  std::string saved_;
};

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("dataset generation is deterministic and split per class") {
  const Dataset a = gen_dataset(DatasetSpec{});
  const Dataset b = gen_dataset(DatasetSpec{});
  CHECK(a.train.size() == 1600);
  CHECK(a.test.size() == 400);
  CHECK(same_samples(a.train, b.train));
  CHECK(same_samples(a.test, b.test));
  DatasetSpec other;
  other.seed = 1;
  CHECK_FALSE(same_samples(gen_dataset(other).train, a.train));

  std::vector<int> per_class(10);
  for (const auto& s : a.test) ++per_class[s.label];
  for (int n : per_class) CHECK(n == 40);
}

TEST_CASE("class wave vectors are distinct") {
  const auto waves = class_wave_vectors(DatasetSpec{});
  REQUIRE(waves.size() == 10);
  for (std::size_t i = 0; i < waves.size(); ++i) {
    const double f = std::hypot(waves[i].first, waves[i].second);
    CHECK(f >= 1.0 - 1e-12);
    CHECK(f <= 4.0 + 1e-12);
    for (std::size_t j = 0; j < i; ++j) {
      const double plus = std::hypot(waves[i].first - waves[j].first, waves[i].second - waves[j].second);
      const double minus = std::hypot(waves[i].first + waves[j].first, waves[i].second + waves[j].second);
      CHECK(std::min(plus, minus) >= 1.0 - 1e-12);
    }
  }
}

TEST_CASE("class-mean images of distinct classes are weakly correlated") {
  const DatasetSpec spec;
  const Dataset d = gen_dataset(spec);
  std::vector<Matrix> means(spec.classes, Matrix(spec.image_side, spec.image_side));
  for (const auto& s : d.train)
    for (std::size_t i = 0; i < s.image.size(); ++i) means[s.label].data()[i] += s.image.data()[i];
  for (std::size_t a = 0; a < spec.classes; ++a)
    for (std::size_t b = 0; b < a; ++b) CHECK(std::abs(correlation(means[a], means[b])) < 0.5);
}

TEST_CASE("label filter") {
  const Dataset d = gen_dataset(tiny_spec(2));
  const auto only = filter_labels(d.train, 1, true);
  const auto rest = filter_labels(d.train, 1, false);
  CHECK(only.size() + rest.size() == d.train.size());
  for (const auto& s : only) CHECK(s.label == 1);
  for (const auto& s : rest) CHECK(s.label != 1);
}

TEST_CASE("cross entropy values") {
  CHECK(cross_entropy(Matrix(2, 7), std::vector<int>{0, 6}) == doctest::Approx(std::log(7.0)).epsilon(1e-15));
  CHECK(cross_entropy(Matrix::from_rows({{0, 1000, 0}}), std::vector<int>{1}) <= 1e-6);
  CHECK_THROWS_AS(cross_entropy(Matrix(1, 3), std::vector<int>{3}), ContractError);
  CHECK_THROWS_AS(cross_entropy(Matrix(2, 3), std::vector<int>{0}), ShapeError);

  Rng rng(3);
  const Matrix z = random_matrix(rng, 5, 4, 3.0);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  long double total = 0.0L;
  for (std::size_t i = 0; i < 5; ++i) {
    long double s = 0.0L;
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(static_cast<long double>(z(i, j)));
    total += std::log(s) - z(i, labels[i]);
  }
  CHECK(cross_entropy(z, labels) == doctest::Approx(static_cast<double>(total / 5)).epsilon(1e-14));
}

TEST_CASE("argmax ties resolve to the lowest index") {
  CHECK(argmax_row(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(argmax_row(std::vector<double>{0, 0, 0}) == 0);
  CHECK(accuracy_from_logits(Matrix(4, 3), std::vector<int>{0, 1, 0, 2}) == 0.5);
}

TEST_CASE("evaluation of degenerate and random models") {
  const Dataset d = gen_dataset(DatasetSpec{});
  vit::VitModel zero = vit::init_model(vit::ModelConfig{}, 1);
  zero.head_w.fill(0.0);
  zero.head_b.fill(0.0);
  std::size_t class0 = 0;
  for (const auto& s : d.test) class0 += s.label == 0;
  CHECK(evaluate(zero, d.test) == static_cast<double>(class0) / d.test.size());

  // Chance level is a property of the initialization distribution, so it is
  // measured over several random models.
  double acc = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) acc += evaluate(vit::init_model(vit::ModelConfig{}, seed), d.test);
  acc /= 10.0;
  CHECK(acc >= 0.07);
  CHECK(acc <= 0.13);
}

TEST_CASE("adam first step and cosine schedule") {
  Matrix p = Matrix::from_rows({{1.0, -2.0}});
  Adam opt({&p}, AdamConfig{});
  opt.step({Matrix::from_rows({{0.5, -4.0}})}, 0.1);
  CHECK(p(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));

  Matrix w(2, 2, 1.0);
  Adam decayed({&w}, AdamConfig{.weight_decay = 0.5});
  decayed.step({Matrix(2, 2)}, 0.1);
  CHECK(w(0, 0) == doctest::Approx(0.95).epsilon(1e-15));

  CHECK(cosine_lr(1.0, 0.1, 0, 11) == 1.0);
  CHECK(cosine_lr(1.0, 0.1, 10, 11) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(cosine_lr(1.0, 0.1, 5, 11) == doctest::Approx(0.55).epsilon(1e-15));
}

TEST_CASE("zero learning rate leaves weights untouched") {
  const Dataset d = gen_dataset(tiny_spec(4));
  const vit::VitModel start = vit::init_model(testing::tiny_config(), 3);
  vit::VitModel m = start;
  TrainConfig tc;
  tc.epochs = 1;
  tc.lr = 0.0;
  tc.lr_min = 0.0;
  train(m, d.train, d.test, tc);
  CHECK(same_weights(m, start));
}

TEST_CASE("training learns the toy task and reports consistent accuracy") {
  const Dataset d = gen_dataset(tiny_spec(5));
  vit::VitModel m = vit::init_model(testing::tiny_config(), 4);
  TrainConfig tc;
  tc.epochs = 4;
  tc.lr = 3e-3;
  tc.seed = 1;
  const TrainResult r = train(m, d.train, d.test, tc);
  REQUIRE(r.curve.size() == 4);
  CHECK(r.curve.back().loss < r.curve.front().loss);
  CHECK(r.final_test_acc() == evaluate(m, d.test));
  CHECK(r.final_test_acc() > 0.5);
}

TEST_CASE("training results do not depend on the worker count") {
  const Dataset d = gen_dataset(tiny_spec(6));
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 9;
  vit::VitModel one = vit::init_model(testing::tiny_config(), 5);
  vit::VitModel three = one;
  {
    ThreadsEnv env("1");
    train(one, d.train, d.test, tc);
  }
  {
    ThreadsEnv env("3");
    train(three, d.train, d.test, tc);
  }
  CHECK(same_weights(one, three));
}

TEST_CASE("divergence aborts with the last good weights") {
  const Dataset d = gen_dataset(tiny_spec(7));
  vit::VitModel m = vit::init_model(testing::tiny_config(), 6);
  const vit::VitModel start = m;
  TrainConfig tc;
  tc.epochs = 2;
  tc.lr = 1e200;
  tc.lr_min = 1e200;
  CHECK_THROWS_AS(train(m, d.train, d.test, tc), DivergenceError);
  bool finite = true;
  vit::visit_tensors(m, [&](const std::string&, const Matrix& t) { finite = finite && t.all_finite(); });
  CHECK(finite);
}

}  // TEST_SUITE
