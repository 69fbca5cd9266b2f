#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factorize/cost.hpp"
#include "factorize/plan.hpp"
#include "vit/model.hpp"

namespace comcat::factorize {

using linalg::FactorPair;
using linalg::Matrix;
using vit::Block;
using vit::FfnWeights;
using vit::LowRankHead;
using vit::LowRankMhaWeights;
using vit::MhaWeights;
using vit::VitModel;

struct HeadProducts {
  Matrix qk;  // wq * wk^T
  Matrix vo;  // wv * wo
};

HeadProducts combine_head(const MhaWeights& w, std::size_t head);
// The combined matrices a block currently represents, whatever its form.
HeadProducts effective_head(const Block& block, std::size_t head);

// Truncated factors of one head's combined matrices.
LowRankHead factor_head(const HeadProducts& products, std::size_t r1, std::size_t r2);

LowRankMhaWeights compress_mha(const MhaWeights& w, std::size_t r1, std::size_t r2);
LowRankMhaWeights compress_mha(const MhaWeights& w, std::span<const std::size_t> r1,
                               std::span<const std::size_t> r2);

// Per-projection factorization: the baseline that ignores head-level structure.
struct MatrixLevelHead {
  FactorPair wq, wk, wv, wo;
};

struct MatrixLevelMha {
  std::size_t rank = 0;
  std::vector<MatrixLevelHead> heads;

  std::size_t parameter_count() const;
  // Dense weights rebuilt from the factors, for evaluation.
  MhaWeights expand() const;
};

// Every projection truncated at the largest uniform rank whose storage fits
// `budget` (parameters for the whole layer). Throws BudgetError when even
// rank 1 does not fit.
MatrixLevelMha compress_matrix_level(const MhaWeights& w, std::uint64_t budget);

FfnWeights compress_ffn(const FfnWeights& f, std::size_t r);
FfnWeights compress_ffn(const FfnWeights& f, std::optional<std::size_t> r1,
                        std::optional<std::size_t> r2);

struct CompressionReport {
  CompressionPlan plan;
  Cost before;
  Cost after;
  // site id -> ||W - W_r||_F / ||W||_F
  std::map<std::string, double> site_error;
  std::optional<double> accuracy_before;
  std::optional<double> accuracy_after;
};

struct CompressedModel {
  VitModel model;
  CompressionReport report;
};

// Applies the plan to every block. Blocks may be dense or already low-rank;
// in the latter case the current effective matrices are re-factorized.
CompressedModel compress_model(const VitModel& model, const CompressionPlan& plan);

// Closed-form cost of a model as currently stored.
Cost model_cost(const VitModel& model);

// The ranks a low-rank model stores; nullopt when any block keeps dense attention.
std::optional<CompressionPlan> model_plan(const VitModel& model);

}  // namespace comcat::factorize
