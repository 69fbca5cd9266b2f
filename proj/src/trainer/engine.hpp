#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trainer/dataset.hpp"
#include "vit/graph.hpp"

namespace comcat::trainer {

// A per-sample graph plus the loss node to differentiate.
struct SampleGraph {
  std::unique_ptr<vit::ModelGraph> graph;
  autodiff::NodeId loss;
};

struct BatchResult {
  double loss = 0.0;     // mean over the batch
  double ce = 0.0;       // mean cross-entropy over the batch
  std::size_t correct = 0;
  std::vector<Matrix> grads;  // mean gradients, aligned with the trainable names
};

// Index of the largest logit, lowest index on ties.
int argmax_row(std::span<const double> logits);

// One graph per worker. Batches are evaluated sample by sample and per-sample
// gradients are summed in batch order, so results do not depend on the
// worker count.
class GraphPool {
 public:
  using Factory = std::function<SampleGraph()>;

  GraphPool(const Factory& factory, std::vector<std::string> trainable);

  // Pushes current values of the named leaves into every worker tape.
  void set_values(const std::vector<std::pair<std::string, const Matrix*>>& values);
  void set_trainable_values(const std::vector<const Matrix*>& values);
  // Applies fn to every worker tape, e.g. to rebind shared inputs.
  void for_each_tape(const std::function<void(autodiff::Tape&, vit::ModelGraph&)>& fn);

  // before_sample(tape, i) runs ahead of sample i's forward pass, on the
  // worker that evaluates it, to bind per-sample leaves.
  using SampleHook = std::function<void(autodiff::Tape&, std::size_t)>;
  BatchResult run(std::span<const Sample* const> batch, bool backward,
                  const SampleHook& before_sample = {});

  const std::vector<std::string>& trainable() const { return trainable_; }

 private:
  std::vector<SampleGraph> workers_;
  std::vector<std::string> trainable_;
  std::vector<std::vector<autodiff::NodeId>> nodes_;  // per worker, aligned with trainable_
};

}  // namespace comcat::trainer
