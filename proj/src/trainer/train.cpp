#include "trainer/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trainer/engine.hpp"
#include "trainer/optim.hpp"
#include "util/error.hpp"
#include "util/rng.hpp"

namespace comcat::trainer {

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows())
    throw ShapeError("cross_entropy: label count does not match logits " + logits.shape_string());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols())
      throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    total += mx + std::log(s) - row[static_cast<std::size_t>(label)];
  }
  return total / static_cast<double>(logits.rows());
}

double accuracy_from_logits(const Matrix& logits, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) hits += argmax_row(logits.row(i)) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate(const vit::VitModel& model, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) hits += argmax_row(vit::forward_one(model, s.image).row(0)) == s.label;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

TrainResult train(vit::VitModel& model, std::span<const Sample> train_set,
                  std::span<const Sample> test_set, const TrainConfig& config) {
  if (config.batch_size == 0) throw ContractError("train: batch size must be positive");
  if (train_set.empty()) throw ContractError("train: empty training set");

  std::vector<std::string> names;
  std::vector<Matrix*> targets;
  vit::visit_tensors(model, [&](const std::string& name, Matrix& m) {
    names.push_back(name);
    targets.push_back(&m);
  });
  GraphPool pool(
      [&] {
        auto g = std::make_unique<vit::ModelGraph>(model);
        const auto loss = g->cross_entropy();
        return SampleGraph{std::move(g), loss};
      },
      names);
  Adam adam(targets, AdamConfig{.weight_decay = config.weight_decay});

  std::vector<const Matrix*> views(targets.begin(), targets.end());
  Rng rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  TrainResult result;
  vit::VitModel last_good = model;
  std::size_t step = 0;
  std::vector<const Sample*> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      pool.set_trainable_values(views);
      BatchResult r = pool.run(batch, true);
      if (!std::isfinite(r.loss)) {
        model = last_good;
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) +
                              ", step " + std::to_string(step) +
                              "; weights restored to the last finished epoch");
      }
      loss_sum += r.loss * static_cast<double>(batch.size());
      correct += r.correct;
      adam.step(r.grads, cosine_lr(config.lr, config.lr_min, step, total_steps));
      ++step;
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = loss_sum / static_cast<double>(train_set.size());
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    stats.test_acc = evaluate(model, test_set);
    result.curve.push_back(stats);
    last_good = model;
  }
  return result;
}

}  // namespace comcat::trainer
