#include "ranksearch/search.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "factorize/compress.hpp"
#include "factorize/cost.hpp"
#include "linalg/svd.hpp"
#include "trainer/engine.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"

namespace comcat::ranksearch {

using factorize::site_params;

std::vector<std::size_t> attention_grid(const ModelConfig& config) {
  const double d = static_cast<double>(config.head_dim());
  std::vector<std::size_t> out;
  for (double f : {0.25, 0.5, 0.75, 1.0, 1.5, 2.0}) {
    const auto r = static_cast<std::size_t>(std::max(1.0, std::round(f * d)));
    out.push_back(std::min(r, config.d_model));
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::size_t> ffn_grid(const ModelConfig& config) {
  const double m = static_cast<double>(std::min(config.d_model, config.ffn_dim));
  std::vector<std::size_t> out;
  for (int k = 1; k <= 6; ++k)
    out.push_back(static_cast<std::size_t>(std::max(1.0, std::round(m * k / 6.0))));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<RankCandidates> default_candidates(const ModelConfig& config) {
  const auto attn = attention_grid(config);
  const auto ffn = ffn_grid(config);
  std::vector<RankCandidates> out;
  for (const auto& site : factorize::all_sites(config)) {
    const bool is_ffn = site.kind == SiteKey::Kind::kFfn1 || site.kind == SiteKey::Kind::kFfn2;
    out.push_back({site, is_ffn ? ffn : attn});
  }
  validate_candidates(config, out);
  return out;
}

void validate_candidates(const ModelConfig& config, std::span<const RankCandidates> candidates) {
  std::map<std::string, bool> seen;
  for (const auto& c : candidates) {
    const std::string id = c.site.id();
    if (seen.count(id)) throw ContractError("duplicate candidate site " + id);
    seen[id] = true;
    if (c.ranks.size() < 2) throw ContractError("site " + id + " needs at least two candidate ranks");
    const std::size_t limit = factorize::max_site_rank(config, c.site.kind);
    for (std::size_t a = 0; a < c.ranks.size(); ++a) {
      if (c.ranks[a] < 1 || c.ranks[a] > limit)
        throw RankRangeError("site " + id + " candidate " + std::to_string(c.ranks[a]) +
                             " outside [1, " + std::to_string(limit) + "]");
      if (a > 0 && c.ranks[a] <= c.ranks[a - 1])
        throw ContractError("site " + id + " candidates must be strictly increasing");
    }
  }
  for (const auto& site : factorize::all_sites(config))
    if (!seen.count(site.id())) throw ContractError("no candidates for site " + site.id());
}

std::vector<double> gumbel_softmax(std::span<const double> alpha, double tau,
                                   std::span<const double> noise) {
  if (!(tau > 0.0)) throw ContractError("gumbel_softmax: temperature must be positive");
  if (noise.size() != alpha.size()) throw ShapeError("gumbel_softmax: noise length differs from alpha");
  std::vector<double> z(alpha.size());
  for (std::size_t a = 0; a < z.size(); ++a) z[a] = (alpha[a] + noise[a]) / tau;
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) total += v = std::exp(v - mx);
  for (double& v : z) v /= total;
  return z;
}

std::vector<double> selection_probabilities(std::span<const double> alpha, double tau) {
  const std::vector<double> zero(alpha.size(), 0.0);
  return gumbel_softmax(alpha, tau, zero);
}

std::size_t argmax_candidate(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < probs.size(); ++a)
    if (probs[a] > probs[best]) best = a;
  return best;
}

double expected_cost(const ModelConfig& config, std::span<const RankCandidates> candidates,
                     std::span<const std::vector<double>> probs) {
  if (probs.size() != candidates.size()) throw ShapeError("expected_cost: one probability row per site");
  double total = 0.0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const auto& c = candidates[j];
    if (probs[j].size() != c.ranks.size()) throw ShapeError("expected_cost: probability length mismatch");
    for (std::size_t a = 0; a < c.ranks.size(); ++a)
      total += probs[j][a] * static_cast<double>(site_params(config, c.site.kind, c.ranks[a]));
  }
  return total;
}

double l_prob(double ce, double expected, double eps, double beta) {
  if (ce < 0.0 || !(expected > 0.0) || !(eps > 0.0))
    throw ContractError("l_prob needs ce >= 0, expected > 0 and eps > 0");
  return ce * std::pow(expected / eps, beta);
}

double l_prob_hinge(double ce, double expected, double eps, double beta, bool gate_open) {
  return gate_open ? l_prob(ce, expected, eps, beta) : l_prob(ce, expected, expected, beta);
}

std::uint64_t minimum_params(const ModelConfig& config, std::span<const RankCandidates> candidates) {
  std::uint64_t total = 0;
  for (const auto& c : candidates) total += site_params(config, c.site.kind, c.ranks.front());
  return total;
}

std::uint64_t dense_site_params(const ModelConfig& config) {
  const auto cost = factorize::cost_count(config);
  return cost.mha_params + cost.ffn_params;
}

Matrix cumulative_indicator(std::span<const std::size_t> ranks) {
  const std::size_t r_max = *std::max_element(ranks.begin(), ranks.end());
  Matrix c(ranks.size(), r_max);
  for (std::size_t a = 0; a < ranks.size(); ++a)
    for (std::size_t j = 0; j < ranks[a]; ++j) c(a, j) = 1.0;
  return c;
}

NodeId mixture_forward(Tape& tape, NodeId x, NodeId u, NodeId s, NodeId probs,
                       std::span<const std::size_t> ranks) {
  const NodeId mask = tape.matmul(probs, tape.input(cumulative_indicator(ranks), "rank_indicator"));
  return tape.matmul(tape.scale_columns(tape.matmul(x, u), mask), s);
}

NodeId mixture_forward_reference(Tape& tape, NodeId x, NodeId u, NodeId s, NodeId probs,
                                 std::span<const std::size_t> ranks) {
  const std::size_t r_max = tape.value(u).cols();
  std::vector<NodeId> branches;
  for (std::size_t r : ranks) {
    Matrix select(r_max, r);
    for (std::size_t j = 0; j < r; ++j) select(j, j) = 1.0;
    const NodeId sel = tape.input(std::move(select), "truncate");
    const NodeId u_r = tape.matmul(u, sel);
    const NodeId s_r = tape.matmul(sel, s, true, false);
    branches.push_back(tape.matmul(tape.matmul(x, u_r), s_r));
  }
  return tape.weighted_sum(probs, branches);
}

NodeId gumbel_softmax_node(Tape& tape, NodeId alpha, NodeId noise, NodeId inv_tau) {
  return tape.softmax_rows(tape.scale_columns(tape.add(alpha, noise), inv_tau));
}

const char* penalty_name(BudgetPenalty p) { return p == BudgetPenalty::kRatio ? "ratio" : "hinge"; }

BudgetPenalty parse_penalty(const std::string& name) {
  if (name == "ratio") return BudgetPenalty::kRatio;
  if (name == "hinge") return BudgetPenalty::kHinge;
  throw ParseError("unknown budget penalty '" + name + "' (expected ratio or hinge)");
}

const char* weight_update_name(WeightUpdate w) {
  switch (w) {
    case WeightUpdate::kMixture: return "mixture";
    case WeightUpdate::kArgmax: return "argmax";
  }
  return "?";
}

WeightUpdate parse_weight_update(const std::string& name) {
  for (auto w : {WeightUpdate::kMixture, WeightUpdate::kArgmax})
    if (name == weight_update_name(w)) return w;
  throw ParseError("unknown weight update '" + name + "' (expected mixture or argmax)");
}

void SearchConfig::validate() const {
  if (!(eps > 0.0)) throw ContractError("search: budget must be positive");
  if (!(beta >= 0.0)) throw ContractError("search: beta must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ContractError("search: label smoothing must lie in [0, 1)");
  if (rounds < 1) throw ContractError("search: rounds must be at least 1");
  if (batch_size < 1) throw ContractError("search: batch size must be positive");
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ContractError("search: temperatures must be positive");
  if (alpha_lr < 0.0 || weight_lr < 0.0) throw ContractError("search: learning rates must be non-negative");
}

namespace {

std::map<std::string, std::size_t> site_index(std::span<const RankCandidates> candidates) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t j = 0; j < candidates.size(); ++j) idx[candidates[j].site.id()] = j;
  return idx;
}

Matrix cost_column(const ModelConfig& config, const RankCandidates& c) {
  Matrix col(c.ranks.size(), 1);
  for (std::size_t a = 0; a < c.ranks.size(); ++a)
    col(a, 0) = static_cast<double>(site_params(config, c.site.kind, c.ranks[a]));
  return col;
}

Matrix hard_mask(const RankCandidates& c, std::size_t rank) {
  Matrix m(1, c.max_rank());
  for (std::size_t j = 0; j < rank; ++j) m(0, j) = 1.0;
  return m;
}

CompressionPlan plan_from_ranks(const ModelConfig& config, std::span<const RankCandidates> candidates,
                                std::span<const std::size_t> ranks) {
  std::map<std::string, std::size_t> m;
  for (std::size_t j = 0; j < candidates.size(); ++j) m[candidates[j].site.id()] = ranks[j];
  return CompressionPlan::from_site_map(config, m);
}

}  // namespace

ProbGraph build_prob_graph(const vit::VitModel& search_model, std::span<const RankCandidates> candidates,
                           std::span<const Matrix> alpha, const SearchConfig& config) {
  const std::size_t n = candidates.size();
  if (alpha.size() != n) throw ShapeError("build_prob_graph: one alpha row per site");
  const auto idx = site_index(candidates);
  ProbGraph pg;
  ProbLossNodes& nodes = pg.nodes;
  for (auto* v : {&nodes.alpha, &nodes.noise, &nodes.inv_tau, &nodes.probs, &nodes.masks}) v->resize(n);
  std::vector<bool> built(n, false);

  vit::GraphOptions options;
  options.model_trainable = false;
  options.label_smoothing = config.label_smoothing;
  options.hooks.site_mask = [&](Tape& tape, const SiteKey& site) -> std::optional<NodeId> {
    auto it = idx.find(site.id());
    if (it == idx.end()) return std::nullopt;
    const std::size_t j = it->second;
    const auto& c = candidates[j];
    const std::string id = site.id();
    const std::size_t k = c.ranks.size();
    nodes.alpha[j] = tape.parameter("alpha." + id, alpha[j]);
    nodes.noise[j] = tape.input(Matrix(1, k), "noise." + id);
    nodes.inv_tau[j] = tape.input(Matrix(1, k, 1.0), "inv_tau." + id);
    nodes.probs[j] = gumbel_softmax_node(tape, nodes.alpha[j], nodes.noise[j], nodes.inv_tau[j]);
    nodes.masks[j] = tape.matmul(nodes.probs[j], tape.input(cumulative_indicator(c.ranks), "rank_indicator." + id));
    built[j] = true;
    return nodes.masks[j];
  };
  pg.graph = std::make_unique<vit::ModelGraph>(search_model, std::move(options));
  for (std::size_t j = 0; j < n; ++j)
    if (!built[j]) throw ContractError("search model has no factorized site " + candidates[j].site.id());

  Tape& tape = pg.graph->tape();
  const ModelConfig& cfg = search_model.config;
  std::optional<NodeId> sum;
  for (std::size_t j = 0; j < n; ++j) {
    const NodeId term = tape.matmul(nodes.probs[j], tape.input(cost_column(cfg, candidates[j]), "cost"));
    sum = sum ? tape.add(*sum, term) : term;
  }
  nodes.expected = *sum;
  nodes.gate = tape.input(Matrix(1, 1, 1.0), "gate");
  nodes.gate_rest = tape.input(Matrix(1, 1, 0.0), "gate_rest");
  const NodeId ratio = tape.scale(nodes.expected, 1.0 / config.eps);
  const NodeId base = tape.add(tape.scale_columns(ratio, nodes.gate), nodes.gate_rest);
  nodes.loss = tape.matmul(pg.graph->cross_entropy(), tape.pow_scalar(base, config.beta));
  return pg;
}

void bind_prob_inputs(Tape& tape, const ProbLossNodes& nodes, double tau, std::span<const Matrix> noise,
                      bool gate_open) {
  for (std::size_t j = 0; j < nodes.noise.size(); ++j) {
    tape.set_value(nodes.noise[j], noise[j]);
    tape.set_value(nodes.inv_tau[j], Matrix(1, noise[j].cols(), 1.0 / tau));
  }
  tape.set_value(nodes.gate, Matrix(1, 1, gate_open ? 1.0 : 0.0));
  tape.set_value(nodes.gate_rest, Matrix(1, 1, gate_open ? 0.0 : 1.0));
}

vit::VitModel truncate_model(const vit::VitModel& search_model, std::span<const RankCandidates> candidates,
                             std::span<const std::size_t> ranks) {
  if (ranks.size() != candidates.size()) throw ShapeError("truncate_model: one rank per site");
  vit::VitModel out = search_model;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const SiteKey& site = candidates[j].site;
    const std::size_t r = ranks[j];
    auto& blk = out.blocks.at(site.block);
    switch (site.kind) {
      case SiteKey::Kind::kQK: {
        auto& h = blk.low_rank.heads.at(site.head);
        h.uq = h.uq.col_block(0, r);
        h.sk = h.sk.col_block(0, r);
        break;
      }
      case SiteKey::Kind::kVO: {
        auto& h = blk.low_rank.heads.at(site.head);
        h.uv = h.uv.col_block(0, r);
        h.so = h.so.row_block(0, r);
        break;
      }
      case SiteKey::Kind::kFfn1: blk.ffn.w1 = std::get<linalg::FactorPair>(blk.ffn.w1).leading(r); break;
      case SiteKey::Kind::kFfn2: blk.ffn.w2 = std::get<linalg::FactorPair>(blk.ffn.w2).leading(r); break;
    }
  }
  return out;
}

CompressionPlan uniform_plan_for_budget(const ModelConfig& config, double budget) {
  const std::size_t d = config.head_dim();
  const std::size_t m = std::min(config.d_model, config.ffn_dim);
  for (std::size_t ra = d; ra >= 1; --ra) {
    const double f = static_cast<double>(ra) / static_cast<double>(d);
    const auto rf = static_cast<std::size_t>(std::max(1.0, std::round(f * static_cast<double>(m))));
    const auto plan = CompressionPlan::uniform(config, ra, ra, rf);
    const auto cost = factorize::cost_count(config, plan);
    if (static_cast<double>(cost.mha_params + cost.ffn_params) <= budget) return plan;
  }
  const double floor_cost = static_cast<double>(
      site_params(config, SiteKey::Kind::kQK, 1) * 2 * config.heads * config.blocks +
      site_params(config, SiteKey::Kind::kFfn1, 1) * 2 * config.blocks);
  throw BudgetError("no uniform plan fits a budget of " + std::to_string(budget) + " parameters",
                    floor_cost);
}

SearchSession::SearchSession(const vit::VitModel& dense, std::span<const trainer::Sample> train,
                             std::span<const trainer::Sample> test, SearchConfig config,
                             std::vector<RankCandidates> candidates)
    : train_(train),
      test_(test),
      config_(config),
      candidates_(std::move(candidates)),
      batch_rng_(config.seed),
      noise_rng_(config.seed ^ 0x5bd1e995u) {
  config_.validate();
  const ModelConfig& cfg = dense.config;
  if (candidates_.empty()) candidates_ = default_candidates(cfg);
  validate_candidates(cfg, candidates_);
  if (train_.empty()) throw ContractError("search: empty training set");
  const std::uint64_t minimum = minimum_params(cfg, candidates_);
  if (config_.eps < static_cast<double>(minimum))
    throw BudgetError("infeasible budget " + std::to_string(static_cast<std::uint64_t>(config_.eps)) +
                          ": the smallest candidate ranks still need " + std::to_string(minimum) +
                          " parameters",
                      static_cast<double>(minimum));

  std::map<std::string, std::size_t> max_ranks;
  for (const auto& c : candidates_) max_ranks[c.site.id()] = c.max_rank();
  model_ = factorize::compress_model(dense, CompressionPlan::from_site_map(cfg, max_ranks)).model;

  // The search starts from the uncompressed model: logits rise linearly with
  // the candidate index so the initial argmax is the max rank. Per-site jitter
  // keeps the sites from crossing rank boundaries in lockstep.
  Rng init_rng(config_.seed ^ 0x2545f4914f6cdd1dULL);
  for (const auto& c : candidates_) {
    Matrix a(1, c.ranks.size());
    const double k = static_cast<double>(c.ranks.size() - 1);
    for (std::size_t i = 0; i < c.ranks.size(); ++i)
      a(0, i) = config_.alpha_init * static_cast<double>(i) / k + init_rng.normal(0.0, config_.alpha_jitter);
    alpha_.push_back(std::move(a));
  }
  std::vector<Matrix*> ptrs;
  for (auto& a : alpha_) ptrs.push_back(&a);
  alpha_opt_ = std::make_unique<trainer::Adam>(ptrs, trainer::AdamConfig{});

  order_.resize(train_.size());
  std::iota(order_.begin(), order_.end(), 0);
  batch_rng_.shuffle(order_);
}

double SearchSession::temperature() const {
  const std::size_t total = config_.rounds * config_.prob_steps;
  if (total <= 1) return config_.tau_end;
  const double t = static_cast<double>(std::min(prob_step_, total - 1)) / static_cast<double>(total - 1);
  return config_.tau_start + (config_.tau_end - config_.tau_start) * t;
}

std::vector<const trainer::Sample*> SearchSession::next_batch() {
  std::vector<const trainer::Sample*> batch;
  while (batch.size() < config_.batch_size) {
    if (cursor_ == order_.size()) {
      batch_rng_.shuffle(order_);
      cursor_ = 0;
    }
    batch.push_back(&train_[order_[cursor_++]]);
  }
  return batch;
}

std::vector<std::size_t> SearchSession::argmax_ranks() const {
  std::vector<std::size_t> ranks;
  const double tau = temperature();
  for (std::size_t j = 0; j < candidates_.size(); ++j)
    ranks.push_back(candidates_[j].ranks[argmax_candidate(selection_probabilities(alpha_[j].data(), tau))]);
  return ranks;
}

CompressionPlan SearchSession::argmax_plan() const {
  return plan_from_ranks(model_.config, candidates_, argmax_ranks());
}

double SearchSession::expected_params() const {
  std::vector<std::vector<double>> probs;
  for (const auto& a : alpha_) probs.push_back(selection_probabilities(a.data(), temperature()));
  return expected_cost(model_.config, candidates_, probs);
}

std::uint64_t SearchSession::argmax_params() const {
  const auto ranks = argmax_ranks();
  std::uint64_t total = 0;
  for (std::size_t j = 0; j < candidates_.size(); ++j)
    total += site_params(model_.config, candidates_[j].site.kind, ranks[j]);
  return total;
}

vit::VitModel SearchSession::argmax_model() const { return truncate_model(model_, candidates_, argmax_ranks()); }

double SearchSession::test_accuracy() const { return trainer::evaluate(argmax_model(), test_); }

void SearchSession::prob_phase() {
  std::vector<ProbLossNodes> node_sets;
  trainer::GraphPool pool(
      [&] {
        ProbGraph pg = build_prob_graph(model_, candidates_, alpha_, config_);
        node_sets.push_back(pg.nodes);
        return trainer::SampleGraph{std::move(pg.graph), pg.nodes.loss};
      },
      [&] {
        std::vector<std::string> names;
        for (const auto& c : candidates_) names.push_back("alpha." + c.site.id());
        return names;
      }());
  const ProbLossNodes& nodes = node_sets.front();

  std::vector<const Matrix*> views;
  for (const auto& a : alpha_) views.push_back(&a);
  double ce_sum = 0.0;
  std::vector<std::vector<Matrix>> noise(config_.batch_size);
  for (std::size_t step = 0; step < config_.prob_steps; ++step) {
    const double tau = temperature();
    // The budget factor applies while the selected plan is over budget. Under
    // budget the hinge holds the probabilities: cross-entropy alone only
    // drifts the ranks further down once the weights follow the argmax plan.
    const bool open = config_.penalty == BudgetPenalty::kRatio || static_cast<double>(argmax_params()) > config_.eps;
    // One Gumbel draw per sample forward pass, generated in batch order.
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
      noise[i].clear();
      for (std::size_t j = 0; j < candidates_.size(); ++j) {
        Matrix g(1, candidates_[j].ranks.size());
        for (double& v : g.data()) v = noise_rng_.gumbel();
        noise[i].push_back(std::move(g));
      }
    }
    pool.set_trainable_values(views);
    const auto batch = next_batch();
    trainer::BatchResult r = pool.run(batch, true, [&](Tape& tape, std::size_t i) {
      bind_prob_inputs(tape, nodes, tau, noise[i], open);
    });
    if (!std::isfinite(r.loss))
      throw DivergenceError("search diverged in the probability phase of round " + std::to_string(round_ + 1));
    ce_sum += r.ce;
    if (open) alpha_opt_->step(r.grads, config_.alpha_lr);
    ++prob_step_;
  }
  TraceRow row;
  row.round = round_ + 1;
  row.phase = "prob";
  row.ce = config_.prob_steps ? ce_sum / static_cast<double>(config_.prob_steps) : 0.0;
  row.expected_params = expected_params();
  row.argmax_params = argmax_params();
  row.accuracy = test_accuracy();
  trace_.push_back(row);
}

void SearchSession::refactorize(std::span<const std::size_t> keep) {
  for (std::size_t j = 0; j < candidates_.size(); ++j) {
    const auto& c = candidates_[j];
    const SiteKey& site = c.site;
    // Right factor rows past keep[j] are zeroed; the left factor stays orthonormal
    // so those components can regrow during training.
    auto cut = [&](linalg::FactorPair& f) {
      for (std::size_t i = keep[j]; i < f.s.rows(); ++i)
        for (std::size_t k = 0; k < f.s.cols(); ++k) f.s(i, k) = 0.0;
    };
    auto& blk = model_.blocks.at(site.block);
    const std::size_t r = c.max_rank();
    switch (site.kind) {
      case SiteKey::Kind::kQK: {
        auto& h = blk.low_rank.heads.at(site.head);
        auto f = linalg::truncated_factor(linalg::matmul_nt(h.uq, h.sk), r);
        cut(f);
        h.uq = std::move(f.u);
        h.sk = f.s.transpose();
        break;
      }
      case SiteKey::Kind::kVO: {
        auto& h = blk.low_rank.heads.at(site.head);
        auto f = linalg::truncated_factor(linalg::matmul(h.uv, h.so), r);
        cut(f);
        h.uv = std::move(f.u);
        h.so = std::move(f.s);
        break;
      }
      case SiteKey::Kind::kFfn1:
      case SiteKey::Kind::kFfn2: {
        auto& w = site.kind == SiteKey::Kind::kFfn1 ? blk.ffn.w1 : blk.ffn.w2;
        auto f = linalg::truncated_factor(std::get<linalg::FactorPair>(w).product(), r);
        cut(f);
        w = std::move(f);
        break;
      }
    }
  }
}

void SearchSession::weight_phase() {
  const auto ranks = argmax_ranks();
  const auto idx = site_index(candidates_);
  const bool mixture = config_.weight_update == WeightUpdate::kMixture;
  if (mixture) {
    refactorize(ranks);
  } else {
    std::vector<std::size_t> full;
    for (const auto& c : candidates_) full.push_back(c.max_rank());
    refactorize(full);
  }
  std::vector<Matrix> masks;
  for (std::size_t j = 0; j < candidates_.size(); ++j) {
    if (!mixture) {
      masks.push_back(hard_mask(candidates_[j], ranks[j]));
      continue;
    }
    const auto p = selection_probabilities(alpha_[j].data(), temperature());
    Matrix row(1, p.size());
    std::copy(p.begin(), p.end(), row.data().begin());
    masks.push_back(linalg::matmul(row, cumulative_indicator(candidates_[j].ranks)));
  }

  std::vector<std::string> names;
  std::vector<Matrix*> targets;
  vit::visit_tensors(model_, [&](const std::string& name, Matrix& m) {
    names.push_back(name);
    targets.push_back(&m);
  });
  trainer::GraphPool pool(
      [&] {
        vit::GraphOptions options;
        options.label_smoothing = config_.label_smoothing;
        options.hooks.site_mask = [&](Tape& tape, const SiteKey& site) -> std::optional<NodeId> {
          auto it = idx.find(site.id());
          if (it == idx.end()) return std::nullopt;
          return tape.input(masks[it->second], "mask." + site.id());
        };
        auto g = std::make_unique<vit::ModelGraph>(model_, std::move(options));
        const NodeId loss = g->cross_entropy();
        return trainer::SampleGraph{std::move(g), loss};
      },
      names);
  trainer::Adam adam(targets, trainer::AdamConfig{});
  std::vector<const Matrix*> views(targets.begin(), targets.end());

  double ce_sum = 0.0;
  for (std::size_t step = 0; step < config_.weight_steps; ++step) {
    pool.set_trainable_values(views);
    const auto batch = next_batch();
    trainer::BatchResult r = pool.run(batch, true);
    if (!std::isfinite(r.loss))
      throw DivergenceError("search diverged in the weight phase of round " + std::to_string(round_ + 1));
    ce_sum += r.ce;
    adam.step(r.grads, config_.weight_lr);
  }
  TraceRow row;
  row.round = round_ + 1;
  row.phase = "weight";
  row.ce = config_.weight_steps ? ce_sum / static_cast<double>(config_.weight_steps) : 0.0;
  row.expected_params = expected_params();
  row.argmax_params = argmax_params();
  row.accuracy = test_accuracy();
  trace_.push_back(row);
}

void SearchSession::round() {
  prob_phase();
  weight_phase();
  ++round_;
}

SearchResult SearchSession::finish() const {
  SearchResult r;
  r.plan = argmax_plan();
  r.model = argmax_model();
  r.trace = trace_;
  r.candidates = candidates_;
  r.alpha = alpha_;
  return r;
}

SearchResult run_search(const vit::VitModel& dense, std::span<const trainer::Sample> train,
                        std::span<const trainer::Sample> test, const SearchConfig& config,
                        const std::function<void(const TraceRow&)>& on_row) {
  SearchSession session(dense, train, test, config);
  for (std::size_t r = 0; r < config.rounds; ++r) {
    const std::size_t before = session.trace().size();
    session.round();
    if (on_row)
      for (std::size_t i = before; i < session.trace().size(); ++i) on_row(session.trace()[i]);
  }
  return session.finish();
}

}  // namespace comcat::ranksearch
