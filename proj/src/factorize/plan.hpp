#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vit/graph.hpp"
#include "vit/model.hpp"

namespace comcat::factorize {

using vit::ModelConfig;
using vit::SiteKey;

// Ranks of one block. An FFN rank of nullopt keeps that matrix dense.
struct BlockPlan {
  std::vector<std::size_t> qk;  // one per head
  std::vector<std::size_t> vo;
  std::optional<std::size_t> ffn1;
  std::optional<std::size_t> ffn2;

  friend bool operator==(const BlockPlan&, const BlockPlan&) = default;
};

struct CompressionPlan {
  std::vector<BlockPlan> blocks;

  // Same r1 / r2 for every head; rffn applies to both FFN matrices.
  static CompressionPlan uniform(const ModelConfig& config, std::size_t r1, std::size_t r2,
                                 std::optional<std::size_t> rffn = std::nullopt);
  // Largest valid rank at every site (a lossless plan).
  static CompressionPlan maximal(const ModelConfig& config);

  // Site ids with a missing or out-of-range rank; empty when the plan fits.
  std::vector<std::string> invalid_sites(const ModelConfig& config) const;
  // Throws RankRangeError listing every offending site.
  void validate(const ModelConfig& config) const;

  // site id -> rank; dense FFN matrices are omitted.
  std::map<std::string, std::size_t> to_site_map() const;
  static CompressionPlan from_site_map(const ModelConfig& config,
                                       const std::map<std::string, std::size_t>& ranks);

  std::size_t rank(const SiteKey& site) const;
  void set_rank(const SiteKey& site, std::size_t rank);

  friend bool operator==(const CompressionPlan&, const CompressionPlan&) = default;
};

// Valid rank range [1, max] of a site.
std::size_t max_site_rank(const ModelConfig& config, SiteKey::Kind kind);

// Every factorizable site in canonical order: per block, heads (QK then VO),
// then FFN1 and FFN2.
std::vector<SiteKey> all_sites(const ModelConfig& config);

}  // namespace comcat::factorize
