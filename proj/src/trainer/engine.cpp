#include "trainer/engine.hpp"

#include <algorithm>

#include "util/error.hpp"
#include "util/parallel.hpp"

namespace comcat::trainer {

int argmax_row(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return static_cast<int>(best);
}

namespace {

autodiff::NodeId lookup(vit::ModelGraph& g, const std::string& name) {
  if (auto id = g.tape().find_parameter(name)) return *id;
  auto it = g.tensor_nodes().find(name);
  if (it != g.tensor_nodes().end()) return it->second;
  throw ContractError("graph has no tensor named '" + name + "'");
}

void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

GraphPool::GraphPool(const Factory& factory, std::vector<std::string> trainable)
    : trainable_(std::move(trainable)) {
  const std::size_t n = std::max<std::size_t>(1, worker_count());
  for (std::size_t w = 0; w < n; ++w) {
    workers_.push_back(factory());
    std::vector<autodiff::NodeId> ids;
    for (const auto& name : trainable_) ids.push_back(lookup(*workers_.back().graph, name));
    nodes_.push_back(std::move(ids));
  }
}

void GraphPool::set_values(const std::vector<std::pair<std::string, const Matrix*>>& values) {
  for (auto& w : workers_)
    for (const auto& [name, m] : values) w.graph->tape().set_value(lookup(*w.graph, name), *m);
}

void GraphPool::set_trainable_values(const std::vector<const Matrix*>& values) {
  for (std::size_t w = 0; w < workers_.size(); ++w)
    for (std::size_t k = 0; k < trainable_.size(); ++k)
      workers_[w].graph->tape().set_value(nodes_[w][k], *values[k]);
}

void GraphPool::for_each_tape(const std::function<void(autodiff::Tape&, vit::ModelGraph&)>& fn) {
  for (auto& w : workers_) fn(w.graph->tape(), *w.graph);
}

BatchResult GraphPool::run(std::span<const Sample* const> batch, bool backward,
                           const SampleHook& before_sample) {
  const std::size_t n = batch.size();
  std::vector<double> losses(n), ces(n);
  std::vector<int> hits(n);
  const bool store = backward && workers_.size() > 1;
  std::vector<std::vector<Matrix>> per_sample(store ? n : 0);

  BatchResult result;
  if (backward) {
    auto& tape = workers_.front().graph->tape();
    for (auto id : nodes_.front()) result.grads.emplace_back(tape.value(id).rows(), tape.value(id).cols());
  }

  parallel_chunks(n, [&](std::size_t worker, std::size_t begin, std::size_t end) {
    auto& sg = workers_[worker];
    auto& tape = sg.graph->tape();
    for (std::size_t i = begin; i < end; ++i) {
      sg.graph->bind(batch[i]->image, batch[i]->label);
      if (before_sample) before_sample(tape, i);
      losses[i] = tape.forward(sg.loss)(0, 0);
      ces[i] = tape.value(sg.graph->cross_entropy())(0, 0);
      hits[i] = argmax_row(tape.value(sg.graph->logits()).row(0)) == batch[i]->label;
      if (!backward) continue;
      tape.backward(sg.loss);
      if (store) {
        for (auto id : nodes_[worker]) per_sample[i].push_back(tape.grad(id));
      } else {
        for (std::size_t k = 0; k < result.grads.size(); ++k) add_into(result.grads[k], tape.grad(nodes_[worker][k]));
      }
    }
  });

  if (store)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < result.grads.size(); ++k) add_into(result.grads[k], per_sample[i][k]);

  const double inv = n ? 1.0 / static_cast<double>(n) : 0.0;
  for (auto& g : result.grads)
    for (double& v : g.data()) v *= inv;
  for (std::size_t i = 0; i < n; ++i) {
    result.loss += losses[i];
    result.ce += ces[i];
    result.correct += static_cast<std::size_t>(hits[i]);
  }
  result.loss *= inv;
  result.ce *= inv;
  return result;
}

}  // namespace comcat::trainer
