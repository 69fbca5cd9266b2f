#pragma once

#include <cstddef>
#include <cstdint>

#include "factorize/plan.hpp"

namespace comcat::factorize {

// Stored parameters and per-image forward FLOPs (2 per multiply-accumulate;
// softmax, layer norm, GELU and additions are not counted).
struct Cost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t mha_params = 0;
  std::uint64_t ffn_params = 0;
  std::uint64_t mha_flops = 0;
  std::uint64_t ffn_flops = 0;

  friend bool operator==(const Cost&, const Cost&) = default;
};

Cost cost_count(const ModelConfig& config);
Cost cost_count(const ModelConfig& config, const CompressionPlan& plan);

// Parameters stored for one factorized site at the given rank.
std::uint64_t site_params(const ModelConfig& config, SiteKey::Kind kind, std::size_t rank);
std::uint64_t site_flops(const ModelConfig& config, SiteKey::Kind kind, std::size_t rank);
// A dense FFN matrix.
std::uint64_t dense_ffn_matrix_params(const ModelConfig& config);

// Parameters of one attention layer factored per projection matrix at a
// uniform rank r (each head: Q, K, V of d_model x d and O of d x d_model).
std::uint64_t matrix_level_params(const ModelConfig& config, std::size_t rank);

}  // namespace comcat::factorize
