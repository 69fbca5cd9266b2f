#include "factorize/plan.hpp"

#include <algorithm>

#include "util/error.hpp"

namespace comcat::factorize {

std::size_t max_site_rank(const ModelConfig& config, SiteKey::Kind kind) {
  switch (kind) {
    case SiteKey::Kind::kQK:
    case SiteKey::Kind::kVO: return config.d_model;
    case SiteKey::Kind::kFfn1:
    case SiteKey::Kind::kFfn2: return std::min(config.d_model, config.ffn_dim);
  }
  return 0;
}

std::vector<SiteKey> all_sites(const ModelConfig& config) {
  std::vector<SiteKey> out;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    for (std::size_t h = 0; h < config.heads; ++h) {
      out.push_back({b, h, SiteKey::Kind::kQK});
      out.push_back({b, h, SiteKey::Kind::kVO});
    }
    out.push_back({b, 0, SiteKey::Kind::kFfn1});
    out.push_back({b, 0, SiteKey::Kind::kFfn2});
  }
  return out;
}

CompressionPlan CompressionPlan::uniform(const ModelConfig& config, std::size_t r1,
                                         std::size_t r2, std::optional<std::size_t> rffn) {
  CompressionPlan plan;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    BlockPlan bp;
    bp.qk.assign(config.heads, r1);
    bp.vo.assign(config.heads, r2);
    bp.ffn1 = rffn;
    bp.ffn2 = rffn;
    plan.blocks.push_back(std::move(bp));
  }
  plan.validate(config);
  return plan;
}

CompressionPlan CompressionPlan::maximal(const ModelConfig& config) {
  const std::size_t r = config.d_model;
  return uniform(config, r, r, max_site_rank(config, SiteKey::Kind::kFfn1));
}

std::vector<std::string> CompressionPlan::invalid_sites(const ModelConfig& config) const {
  std::vector<std::string> bad;
  if (blocks.size() != config.blocks) {
    bad.push_back("plan has " + std::to_string(blocks.size()) + " blocks, model has " +
                  std::to_string(config.blocks));
    return bad;
  }
  for (const auto& site : all_sites(config)) {
    const auto& bp = blocks[site.block];
    const std::size_t limit = max_site_rank(config, site.kind);
    std::optional<std::size_t> r;
    switch (site.kind) {
      case SiteKey::Kind::kQK:
        if (site.head < bp.qk.size()) r = bp.qk[site.head];
        break;
      case SiteKey::Kind::kVO:
        if (site.head < bp.vo.size()) r = bp.vo[site.head];
        break;
      case SiteKey::Kind::kFfn1:
        if (!bp.ffn1) continue;
        r = bp.ffn1;
        break;
      case SiteKey::Kind::kFfn2:
        if (!bp.ffn2) continue;
        r = bp.ffn2;
        break;
    }
    if (!r) {
      bad.push_back(site.id() + " (missing)");
    } else if (*r < 1 || *r > limit) {
      bad.push_back(site.id() + " (rank " + std::to_string(*r) + " outside [1, " +
                    std::to_string(limit) + "])");
    }
  }
  for (std::size_t b = 0; b < blocks.size(); ++b)
    if (blocks[b].qk.size() > config.heads || blocks[b].vo.size() > config.heads)
      bad.push_back("b" + std::to_string(b) + " (more head ranks than heads)");
  return bad;
}

void CompressionPlan::validate(const ModelConfig& config) const {
  const auto bad = invalid_sites(config);
  if (bad.empty()) return;
  std::string msg = "invalid compression plan:";
  for (const auto& s : bad) msg += " " + s + ";";
  msg.pop_back();
  throw RankRangeError(msg);
}

std::map<std::string, std::size_t> CompressionPlan::to_site_map() const {
  std::map<std::string, std::size_t> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& bp = blocks[b];
    for (std::size_t h = 0; h < bp.qk.size(); ++h) out[SiteKey{b, h, SiteKey::Kind::kQK}.id()] = bp.qk[h];
    for (std::size_t h = 0; h < bp.vo.size(); ++h) out[SiteKey{b, h, SiteKey::Kind::kVO}.id()] = bp.vo[h];
    if (bp.ffn1) out[SiteKey{b, 0, SiteKey::Kind::kFfn1}.id()] = *bp.ffn1;
    if (bp.ffn2) out[SiteKey{b, 0, SiteKey::Kind::kFfn2}.id()] = *bp.ffn2;
  }
  return out;
}

CompressionPlan CompressionPlan::from_site_map(const ModelConfig& config,
                                               const std::map<std::string, std::size_t>& ranks) {
  CompressionPlan plan;
  plan.blocks.resize(config.blocks);
  for (auto& bp : plan.blocks) {
    bp.qk.assign(config.heads, 0);
    bp.vo.assign(config.heads, 0);
  }
  std::size_t used = 0;
  for (const auto& site : all_sites(config)) {
    auto it = ranks.find(site.id());
    if (it == ranks.end()) continue;
    plan.set_rank(site, it->second);
    ++used;
  }
  if (used != ranks.size()) {
    std::string unknown;
    std::map<std::string, bool> known;
    for (const auto& site : all_sites(config)) known[site.id()] = true;
    for (const auto& [id, r] : ranks)
      if (!known.count(id)) unknown += " " + id;
    throw ParseError("plan names sites the model does not have:" + unknown);
  }
  plan.validate(config);
  return plan;
}

std::size_t CompressionPlan::rank(const SiteKey& site) const {
  const auto& bp = blocks.at(site.block);
  switch (site.kind) {
    case SiteKey::Kind::kQK: return bp.qk.at(site.head);
    case SiteKey::Kind::kVO: return bp.vo.at(site.head);
    case SiteKey::Kind::kFfn1: return bp.ffn1.value_or(0);
    case SiteKey::Kind::kFfn2: return bp.ffn2.value_or(0);
  }
  return 0;
}

void CompressionPlan::set_rank(const SiteKey& site, std::size_t rank) {
  auto& bp = blocks.at(site.block);
  switch (site.kind) {
    case SiteKey::Kind::kQK: bp.qk.at(site.head) = rank; break;
    case SiteKey::Kind::kVO: bp.vo.at(site.head) = rank; break;
    case SiteKey::Kind::kFfn1: bp.ffn1 = rank; break;
    case SiteKey::Kind::kFfn2: bp.ffn2 = rank; break;
  }
}

}  // namespace comcat::factorize
