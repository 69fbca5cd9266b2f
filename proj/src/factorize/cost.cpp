#include "factorize/cost.hpp"

namespace comcat::factorize {

namespace {

using u64 = std::uint64_t;

struct Dims {
  u64 n, dm, d, h, df, b, c, pf;
  explicit Dims(const ModelConfig& cfg)
      : n(cfg.seq_len()), dm(cfg.d_model), d(cfg.head_dim()), h(cfg.heads), df(cfg.ffn_dim),
        b(cfg.blocks), c(cfg.classes), pf(cfg.patch_features()) {}
};

// Everything outside attention and FFN weight matrices.
void add_fixed(const Dims& x, Cost& cost) {
  const u64 embed = x.pf * x.dm + x.n * x.dm;
  const u64 norms = 2 * x.dm * (2 * x.b + 1);
  const u64 ffn_bias = x.b * (x.df + x.dm);
  const u64 head = x.dm * x.c + x.c;
  cost.params += embed + norms + ffn_bias + head;
  // Patch embedding over every token, classifier on the class token only.
  cost.flops += 2 * (x.n * x.pf * x.dm + x.dm * x.c);
}

void finish(Cost& cost) {
  cost.params += cost.mha_params + cost.ffn_params;
  cost.flops += cost.mha_flops + cost.ffn_flops;
}

}  // namespace

std::uint64_t site_params(const ModelConfig& config, SiteKey::Kind kind, std::size_t rank) {
  const Dims x(config);
  switch (kind) {
    case SiteKey::Kind::kQK:
    case SiteKey::Kind::kVO: return 2 * x.dm * rank;
    case SiteKey::Kind::kFfn1:
    case SiteKey::Kind::kFfn2: return rank * (x.dm + x.df);
  }
  return 0;
}

std::uint64_t site_flops(const ModelConfig& config, SiteKey::Kind kind, std::size_t rank) {
  const Dims x(config);
  switch (kind) {
    // Two input projections then one n x n product of inner size r. For VO the
    // projections are X*uv and (A*X*uv)*so, the products A*(X*uv) the n x n one.
    case SiteKey::Kind::kQK:
    case SiteKey::Kind::kVO: return 2 * (2 * x.n * x.dm * rank + x.n * x.n * rank);
    case SiteKey::Kind::kFfn1:
    case SiteKey::Kind::kFfn2: return 2 * x.n * rank * (x.dm + x.df);
  }
  return 0;
}

std::uint64_t dense_ffn_matrix_params(const ModelConfig& config) {
  return static_cast<u64>(config.d_model) * config.ffn_dim;
}

std::uint64_t matrix_level_params(const ModelConfig& config, std::size_t rank) {
  const Dims x(config);
  return x.h * 4 * rank * (x.dm + x.d);
}

Cost cost_count(const ModelConfig& config) {
  const Dims x(config);
  Cost cost;
  add_fixed(x, cost);
  cost.mha_params = x.b * 4 * x.dm * x.dm;
  cost.mha_flops = x.b * 2 * (4 * x.n * x.dm * x.dm + 2 * x.h * x.n * x.n * x.d);
  cost.ffn_params = x.b * 2 * x.dm * x.df;
  cost.ffn_flops = x.b * 2 * (2 * x.n * x.dm * x.df);
  finish(cost);
  return cost;
}

Cost cost_count(const ModelConfig& config, const CompressionPlan& plan) {
  plan.validate(config);
  const Dims x(config);
  Cost cost;
  add_fixed(x, cost);
  for (const auto& bp : plan.blocks) {
    for (std::size_t r : bp.qk) {
      cost.mha_params += site_params(config, SiteKey::Kind::kQK, r);
      cost.mha_flops += site_flops(config, SiteKey::Kind::kQK, r);
    }
    for (std::size_t r : bp.vo) {
      cost.mha_params += site_params(config, SiteKey::Kind::kVO, r);
      cost.mha_flops += site_flops(config, SiteKey::Kind::kVO, r);
    }
    for (const auto& r : {bp.ffn1, bp.ffn2}) {
      if (r) {
        cost.ffn_params += site_params(config, SiteKey::Kind::kFfn1, *r);
        cost.ffn_flops += site_flops(config, SiteKey::Kind::kFfn1, *r);
      } else {
        cost.ffn_params += x.dm * x.df;
        cost.ffn_flops += 2 * x.n * x.dm * x.df;
      }
    }
  }
  finish(cost);
  return cost;
}

}  // namespace comcat::factorize
