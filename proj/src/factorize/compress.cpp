#include "factorize/compress.hpp"

#include <cmath>

#include "linalg/svd.hpp"
#include "util/error.hpp"

namespace comcat::factorize {

using linalg::matmul;
using linalg::matmul_nt;
using linalg::svd;
using linalg::SvdResult;

namespace {

void check_rank(std::size_t r, std::size_t limit, const std::string& what) {
  if (r < 1 || r > limit)
    throw RankRangeError(what + " rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(limit) + "]");
}

double relative_tail(const SvdResult& s, std::size_t r) {
  double total = 0.0;
  for (double v : s.sigma) total += v * v;
  if (total == 0.0) return 0.0;
  return linalg::tail_energy(s.sigma, r) / std::sqrt(total);
}

LowRankHead factor_from_svd(const SvdResult& qk, const SvdResult& vo, std::size_t r1,
                            std::size_t r2) {
  LowRankHead out;
  FactorPair q = linalg::truncated_factor(qk, r1);
  out.uq = std::move(q.u);
  out.sk = q.s.transpose();
  FactorPair v = linalg::truncated_factor(vo, r2);
  out.uv = std::move(v.u);
  out.so = std::move(v.s);
  return out;
}

}  // namespace

HeadProducts combine_head(const MhaWeights& w, std::size_t head) {
  if (head >= w.heads.size())
    throw ContractError("head index " + std::to_string(head) + " out of range (" +
                        std::to_string(w.heads.size()) + " heads)");
  const auto& hw = w.heads[head];
  return {matmul_nt(hw.wq, hw.wk), matmul(hw.wv, hw.wo)};
}

HeadProducts effective_head(const Block& block, std::size_t head) {
  if (block.form != vit::MhaForm::kLowRank) return combine_head(block.mha, head);
  if (head >= block.low_rank.heads.size())
    throw ContractError("head index " + std::to_string(head) + " out of range");
  const auto& hw = block.low_rank.heads[head];
  return {matmul_nt(hw.uq, hw.sk), matmul(hw.uv, hw.so)};
}

LowRankHead factor_head(const HeadProducts& products, std::size_t r1, std::size_t r2) {
  check_rank(r1, products.qk.rows(), "QK");
  check_rank(r2, products.vo.rows(), "VO");
  return factor_from_svd(svd(products.qk), svd(products.vo), r1, r2);
}

LowRankMhaWeights compress_mha(const MhaWeights& w, std::size_t r1, std::size_t r2) {
  const std::vector<std::size_t> a(w.heads.size(), r1), b(w.heads.size(), r2);
  return compress_mha(w, a, b);
}

LowRankMhaWeights compress_mha(const MhaWeights& w, std::span<const std::size_t> r1,
                               std::span<const std::size_t> r2) {
  if (r1.size() != w.heads.size() || r2.size() != w.heads.size())
    throw ContractError("compress_mha: need one rank per head");
  LowRankMhaWeights out;
  for (std::size_t i = 0; i < w.heads.size(); ++i)
    out.heads.push_back(factor_head(combine_head(w, i), r1[i], r2[i]));
  return out;
}

std::size_t MatrixLevelMha::parameter_count() const {
  std::size_t total = 0;
  for (const auto& h : heads)
    total += h.wq.parameter_count() + h.wk.parameter_count() + h.wv.parameter_count() +
             h.wo.parameter_count();
  return total;
}

MhaWeights MatrixLevelMha::expand() const {
  MhaWeights out;
  for (const auto& h : heads)
    out.heads.push_back({h.wq.product(), h.wk.product(), h.wv.product(), h.wo.product()});
  return out;
}

MatrixLevelMha compress_matrix_level(const MhaWeights& w, std::uint64_t budget) {
  if (w.heads.empty()) throw ContractError("compress_matrix_level: no heads");
  std::uint64_t per_rank = 0;
  std::size_t max_rank = SIZE_MAX;
  for (const auto& hw : w.heads)
    for (const Matrix* m : {&hw.wq, &hw.wk, &hw.wv, &hw.wo}) {
      per_rank += m->rows() + m->cols();
      max_rank = std::min(max_rank, std::min(m->rows(), m->cols()));
    }
  if (budget < per_rank)
    throw BudgetError("matrix-level budget " + std::to_string(budget) +
                          " is below the rank-1 cost " + std::to_string(per_rank),
                      static_cast<double>(per_rank));
  MatrixLevelMha out;
  out.rank = std::min<std::uint64_t>(max_rank, budget / per_rank);
  for (const auto& hw : w.heads)
    out.heads.push_back({linalg::truncated_factor(hw.wq, out.rank),
                         linalg::truncated_factor(hw.wk, out.rank),
                         linalg::truncated_factor(hw.wv, out.rank),
                         linalg::truncated_factor(hw.wo, out.rank)});
  return out;
}

FfnWeights compress_ffn(const FfnWeights& f, std::size_t r) { return compress_ffn(f, r, r); }

FfnWeights compress_ffn(const FfnWeights& f, std::optional<std::size_t> r1,
                        std::optional<std::size_t> r2) {
  FfnWeights out = f;
  auto apply = [](const vit::LinearWeight& w, std::optional<std::size_t> r,
                  const char* what) -> vit::LinearWeight {
    const Matrix dense = vit::linear_product(w);
    if (!r) return dense;
    check_rank(*r, std::min(dense.rows(), dense.cols()), what);
    return linalg::truncated_factor(dense, *r);
  };
  out.w1 = apply(f.w1, r1, "FFN1");
  out.w2 = apply(f.w2, r2, "FFN2");
  return out;
}

Cost model_cost(const VitModel& model) {
  const ModelConfig& cfg = model.config;
  Cost cost = cost_count(cfg);
  const Cost dense = cost;
  cost.mha_params = cost.mha_flops = cost.ffn_params = cost.ffn_flops = 0;
  const std::uint64_t dense_mha_params = dense.mha_params / cfg.blocks;
  const std::uint64_t dense_mha_flops = dense.mha_flops / cfg.blocks;
  const std::uint64_t n = cfg.seq_len();
  for (const auto& blk : model.blocks) {
    if (blk.form == vit::MhaForm::kLowRank) {
      for (const auto& hw : blk.low_rank.heads) {
        cost.mha_params += site_params(cfg, SiteKey::Kind::kQK, hw.qk_rank()) +
                           site_params(cfg, SiteKey::Kind::kVO, hw.vo_rank());
        cost.mha_flops += site_flops(cfg, SiteKey::Kind::kQK, hw.qk_rank()) +
                          site_flops(cfg, SiteKey::Kind::kVO, hw.vo_rank());
      }
    } else {
      cost.mha_params += dense_mha_params;
      cost.mha_flops += dense_mha_flops;
    }
    for (const auto* w : {&blk.ffn.w1, &blk.ffn.w2}) {
      if (const auto* f = std::get_if<FactorPair>(w)) {
        cost.ffn_params += site_params(cfg, SiteKey::Kind::kFfn1, f->rank());
        cost.ffn_flops += site_flops(cfg, SiteKey::Kind::kFfn1, f->rank());
      } else {
        cost.ffn_params += dense_ffn_matrix_params(cfg);
        cost.ffn_flops += 2 * n * dense_ffn_matrix_params(cfg);
      }
    }
  }
  cost.params = dense.params - dense.mha_params - dense.ffn_params + cost.mha_params + cost.ffn_params;
  cost.flops = dense.flops - dense.mha_flops - dense.ffn_flops + cost.mha_flops + cost.ffn_flops;
  return cost;
}

CompressedModel compress_model(const VitModel& model, const CompressionPlan& plan) {
  const ModelConfig& cfg = model.config;
  plan.validate(cfg);
  if (model.blocks.size() != cfg.blocks) throw ContractError("model block count disagrees with config");

  CompressedModel result;
  result.model = model;
  CompressionReport& report = result.report;
  report.plan = plan;
  report.before = model_cost(model);

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const Block& src = model.blocks[b];
    Block& dst = result.model.blocks[b];
    const BlockPlan& bp = plan.blocks[b];
    LowRankMhaWeights low;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      const HeadProducts prod = effective_head(src, i);
      const SvdResult qk = svd(prod.qk);
      const SvdResult vo = svd(prod.vo);
      low.heads.push_back(factor_from_svd(qk, vo, bp.qk[i], bp.vo[i]));
      report.site_error[SiteKey{b, i, SiteKey::Kind::kQK}.id()] = relative_tail(qk, bp.qk[i]);
      report.site_error[SiteKey{b, i, SiteKey::Kind::kVO}.id()] = relative_tail(vo, bp.vo[i]);
    }
    dst.form = vit::MhaForm::kLowRank;
    dst.low_rank = std::move(low);
    dst.mha = {};

    auto ffn_site = [&](const vit::LinearWeight& w, std::optional<std::size_t> r,
                        SiteKey::Kind kind) -> vit::LinearWeight {
      Matrix dense = vit::linear_product(w);
      if (!r) return dense;
      const SvdResult s = svd(dense);
      report.site_error[SiteKey{b, 0, kind}.id()] = relative_tail(s, *r);
      return linalg::truncated_factor(s, *r);
    };
    dst.ffn.w1 = ffn_site(src.ffn.w1, bp.ffn1, SiteKey::Kind::kFfn1);
    dst.ffn.w2 = ffn_site(src.ffn.w2, bp.ffn2, SiteKey::Kind::kFfn2);
  }

  report.after = cost_count(cfg, plan);
  if (report.after.params != vit::parameter_count(result.model))
    throw ContractError("compressed parameter count disagrees with the closed form");
  return result;
}

std::optional<CompressionPlan> model_plan(const VitModel& model) {
  CompressionPlan plan;
  for (const auto& blk : model.blocks) {
    if (blk.form != vit::MhaForm::kLowRank) return std::nullopt;
    BlockPlan bp;
    for (const auto& h : blk.low_rank.heads) {
      bp.qk.push_back(h.qk_rank());
      bp.vo.push_back(h.vo_rank());
    }
    if (const auto* f = std::get_if<linalg::FactorPair>(&blk.ffn.w1)) bp.ffn1 = f->rank();
    if (const auto* f = std::get_if<linalg::FactorPair>(&blk.ffn.w2)) bp.ffn2 = f->rank();
    plan.blocks.push_back(std::move(bp));
  }
  return plan;
}

}  // namespace comcat::factorize
