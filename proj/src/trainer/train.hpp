#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "trainer/dataset.hpp"
#include "vit/model.hpp"

namespace comcat::trainer {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double lr_min = 1e-5;  // cosine decay floor
  double weight_decay = 0.005;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;  // running accuracy over the epoch's batches
  double test_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double final_test_acc() const { return curve.empty() ? 0.0 : curve.back().test_acc; }
};

// Mean over rows of -log softmax(logits)[label].
double cross_entropy(const Matrix& logits, std::span<const int> labels);

// Top-1 accuracy; ties resolve to the lowest class index.
double evaluate(const vit::VitModel& model, std::span<const Sample> samples);
double accuracy_from_logits(const Matrix& logits, std::span<const int> labels);

// Trains every tensor of the model with Adam and cosine decay. Throws
// DivergenceError on a non-finite loss after restoring the last finished
// epoch's weights.
TrainResult train(vit::VitModel& model, std::span<const Sample> train_set,
                  std::span<const Sample> test_set, const TrainConfig& config);

}  // namespace comcat::trainer
