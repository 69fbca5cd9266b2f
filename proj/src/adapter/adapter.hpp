#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "io/container.hpp"
#include "trainer/dataset.hpp"
#include "vit/graph.hpp"
#include "vit/model.hpp"

namespace comcat::adapter {

using linalg::Matrix;
using vit::ModelConfig;
using vit::VitModel;

// Additive factors of one head: wq wk^T + uq sk^T and wv wo + uv so.
// uq, sk, uv are d_model x r; so is r x d_model.
struct AdapterHead {
  Matrix uq, sk, uv, so;
};

struct AdapterWeights {
  std::size_t rank = 0;
  std::vector<std::vector<AdapterHead>> blocks;  // [block][head]

  std::size_t parameter_count() const;
};

struct AdapterInit {
  double stddev = 0.02;
  // Draws sk and so from the same Gaussian instead of zeroing them; the
  // adapted model then no longer starts at the frozen function.
  bool random_second = false;
};

AdapterWeights init_adapter(const ModelConfig& config, std::size_t rank, std::uint64_t seed,
                            AdapterInit init = {});

// sum_i Softmax(xq (wq_i wk_i^T + uq_i sk_i^T) xk^T / sqrt(d)) xv (wv_i wo_i + uv_i so_i).
// Zero second factors reproduce mha_combined bit for bit.
Matrix adapter_forward(const Matrix& xq, const Matrix& xk, const Matrix& xv, const vit::MhaWeights& base,
                       std::span<const AdapterHead> heads);

// Logits (1 x classes) of the frozen model with adapted attention in every block.
Matrix adapted_forward_one(const VitModel& base, const AdapterWeights& adapter, const Matrix& image);
double adapted_accuracy(const VitModel& base, const AdapterWeights& adapter,
                        std::span<const trainer::Sample> samples);

// Per-image graph of the adapted model. Adapter factors are parameters named
// "adapter.blocks.<b>.attn.<h>.<uq|sk|uv|so>"; base tensors are constants. The
// adapter is read only while the graph is built.
std::unique_ptr<vit::ModelGraph> adapter_graph(const VitModel& base, const AdapterWeights& adapter);

struct AdaptConfig {
  std::size_t rank = 4;
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  AdapterInit init;
  std::uint64_t seed = 0;
};

struct AdaptResult {
  AdapterWeights adapter;
  std::vector<double> loss_curve;  // mean batch cross-entropy per step
  double initial_loss = 0.0;       // full adaptation set, before the first step
  double final_loss = 0.0;         // full adaptation set, after the last step
};

// Trains only the adapter factors; every base tensor stays a constant.
// Requires dense attention in every block.
AdaptResult adapt(const VitModel& base, std::span<const trainer::Sample> data, const AdaptConfig& config);

// Held-out-class task: all samples of `holdout` plus an equal number of
// samples from the other classes (taken in order, round-robin over classes)
// so the adapted model keeps its old decisions.
std::vector<trainer::Sample> customization_set(std::span<const trainer::Sample> samples, int holdout);

io::Container adapter_container(const ModelConfig& config, const AdapterWeights& adapter,
                                const std::string& base_checksum);
AdapterWeights adapter_from_container(const io::Container& c);
std::string write_adapter(const std::filesystem::path& path, const ModelConfig& config,
                          const AdapterWeights& adapter, const std::string& base_checksum);
// Reads an adapter and checks it against the SHA-256 of the base file.
AdapterWeights read_adapter(const std::filesystem::path& path, const std::string& base_checksum);

}  // namespace comcat::adapter
