#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "autodiff/tape.hpp"
#include "factorize/plan.hpp"
#include "trainer/dataset.hpp"
#include "trainer/optim.hpp"
#include "util/rng.hpp"
#include "vit/graph.hpp"
#include "vit/model.hpp"

namespace comcat::ranksearch {

using autodiff::NodeId;
using autodiff::Tape;
using factorize::CompressionPlan;
using linalg::Matrix;
using vit::ModelConfig;
using vit::SiteKey;

// Ascending candidate ranks of one site.
struct RankCandidates {
  SiteKey site;
  std::vector<std::size_t> ranks;

  std::size_t max_rank() const { return ranks.back(); }
};

// {d/4, d/2, 3d/4, d, 3d/2, 2d} clamped to [1, d_model], duplicates removed.
std::vector<std::size_t> attention_grid(const ModelConfig& config);
// Six evenly spaced ranks ending at min(d_model, ffn_dim).
std::vector<std::size_t> ffn_grid(const ModelConfig& config);
std::vector<RankCandidates> default_candidates(const ModelConfig& config);
void validate_candidates(const ModelConfig& config, std::span<const RankCandidates> candidates);

// softmax((alpha + noise) / tau).
std::vector<double> gumbel_softmax(std::span<const double> alpha, double tau,
                                   std::span<const double> noise);
// Noise-free probabilities used for the argmax decision and the trace.
std::vector<double> selection_probabilities(std::span<const double> alpha, double tau);
// Largest probability; the smallest rank wins ties.
std::size_t argmax_candidate(std::span<const double> probs);

// sum over sites of sum_a p_a * params(r_a).
double expected_cost(const ModelConfig& config, std::span<const RankCandidates> candidates,
                     std::span<const std::vector<double>> probs);

// ce * (expected / eps)^beta.
double l_prob(double ce, double expected, double eps, double beta);
// ce * (expected / eps)^beta when the gate is open, ce otherwise.
double l_prob_hinge(double ce, double expected, double eps, double beta, bool gate_open);

// Cost of the MHA and FFN sites when every site takes its smallest candidate.
std::uint64_t minimum_params(const ModelConfig& config, std::span<const RankCandidates> candidates);
// The same sites, dense.
std::uint64_t dense_site_params(const ModelConfig& config);

// K x r_max matrix whose row a has ones in the first r_a columns. A
// probability row p times this matrix gives the column mask that turns the
// max-rank factors into the p-weighted mixture of nested truncations.
Matrix cumulative_indicator(std::span<const std::size_t> ranks);

// Tape builders for a single factorized site y = x * u * s.
//   probs: 1 x K node. u: in x r_max, s: r_max x out.
// mask route: (x * u) column-scaled by probs * C, then * s.
NodeId mixture_forward(Tape& tape, NodeId x, NodeId u, NodeId s, NodeId probs,
                       std::span<const std::size_t> ranks);
// Literal route: weighted_sum over explicit truncations x * u[:, :r_a] * s[:r_a, :].
NodeId mixture_forward_reference(Tape& tape, NodeId x, NodeId u, NodeId s, NodeId probs,
                                 std::span<const std::size_t> ranks);
// softmax(scale_columns(alpha + noise, inv_tau)); noise and inv_tau are leaves.
NodeId gumbel_softmax_node(Tape& tape, NodeId alpha, NodeId noise, NodeId inv_tau);

enum class BudgetPenalty : std::uint8_t {
  kRatio,  // (E / eps)^beta at every step
  kHinge,  // (E / eps)^beta while the argmax plan exceeds eps; otherwise alpha is held
};

const char* penalty_name(BudgetPenalty p);
BudgetPenalty parse_penalty(const std::string& name);

// How phase 2 trains the weights after re-factorizing at the argmax ranks.
enum class WeightUpdate : std::uint8_t {
  kArgmax,   // hard argmax mask; tail components kept but unused
  kMixture,  // components past the argmax rank zeroed, then trained through the frozen-probability mixture
};

const char* weight_update_name(WeightUpdate w);
WeightUpdate parse_weight_update(const std::string& name);

struct SearchConfig {
  double eps = 0.0;  // target parameter count of the MHA and FFN sites
  double beta = 1.5;
  std::size_t rounds = 10;
  std::size_t prob_steps = 40;
  std::size_t weight_steps = 40;
  std::size_t batch_size = 32;
  double alpha_lr = 0.01;
  // Initial logit of the max-rank candidate; smaller candidates get a linear ramp down to 0.
  double alpha_init = 0.5;
  double alpha_jitter = 0.1;
  double weight_lr = 1e-3;
  double tau_start = 5.0;
  double tau_end = 0.5;
  BudgetPenalty penalty = BudgetPenalty::kHinge;
  WeightUpdate weight_update = WeightUpdate::kArgmax;
  // Applied to the cross-entropy of both phases.
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TraceRow {
  std::size_t round = 0;
  std::string phase;  // prob | weight
  double ce = 0.0;    // mean training cross-entropy over the phase
  double expected_params = 0.0;
  std::uint64_t argmax_params = 0;
  double accuracy = 0.0;  // test accuracy of the argmax-truncated model
};

struct SearchResult {
  CompressionPlan plan;
  vit::VitModel model;
  std::vector<TraceRow> trace;
  std::vector<RankCandidates> candidates;
  std::vector<Matrix> alpha;  // 1 x K per site
};

// Alternating probability / weight search over one dense model.
class SearchSession {
 public:
  SearchSession(const vit::VitModel& dense, std::span<const trainer::Sample> train,
                std::span<const trainer::Sample> test, SearchConfig config,
                std::vector<RankCandidates> candidates = {});

  // Phase 1 then phase 2; appends two trace rows.
  void round();
  void prob_phase();
  void weight_phase();

  std::size_t rounds_done() const { return round_; }
  double temperature() const;
  CompressionPlan argmax_plan() const;
  // Expected parameters under the noise-free probabilities at the current temperature.
  double expected_params() const;
  std::uint64_t argmax_params() const;
  // Model truncated at the argmax ranks.
  vit::VitModel argmax_model() const;
  const std::vector<TraceRow>& trace() const { return trace_; }
  const std::vector<Matrix>& alpha() const { return alpha_; }
  std::vector<Matrix>& alpha() { return alpha_; }
  const vit::VitModel& search_model() const { return model_; }
  const std::vector<RankCandidates>& candidates() const { return candidates_; }

  SearchResult finish() const;

 private:
  std::vector<const trainer::Sample*> next_batch();
  std::vector<std::size_t> argmax_ranks() const;
  void refactorize(std::span<const std::size_t> keep);
  double test_accuracy() const;

  vit::VitModel model_;  // low-rank, every site at its max candidate rank
  std::span<const trainer::Sample> train_;
  std::span<const trainer::Sample> test_;
  SearchConfig config_;
  std::vector<RankCandidates> candidates_;
  std::vector<Matrix> alpha_;
  std::unique_ptr<trainer::Adam> alpha_opt_;
  std::size_t round_ = 0;
  std::size_t prob_step_ = 0;
  Rng batch_rng_;
  Rng noise_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<TraceRow> trace_;
};

// Builds the phase-1 loss on a tape that already holds a model graph: per
// site alpha parameters, Gumbel noise and temperature leaves, masks, and the
// budget-penalized loss. Returned ids let callers rebind leaves.
struct ProbLossNodes {
  std::vector<NodeId> alpha, noise, inv_tau, probs, masks;
  NodeId gate;       // 1 x 1: 1 applies the ratio, 0 clamps the penalty base to 1
  NodeId gate_rest;  // 1 x 1: 1 - gate
  NodeId expected;   // 1 x 1
  NodeId loss;
};

// Phase-1 graph for one sample: cross-entropy times the budget penalty.
struct ProbGraph {
  std::unique_ptr<vit::ModelGraph> graph;
  ProbLossNodes nodes;
};

ProbGraph build_prob_graph(const vit::VitModel& search_model, std::span<const RankCandidates> candidates,
                           std::span<const Matrix> alpha, const SearchConfig& config);
// Rebinds temperature, noise and the hinge gate. noise holds one row per site.
void bind_prob_inputs(Tape& tape, const ProbLossNodes& nodes, double tau, std::span<const Matrix> noise,
                      bool gate_open);

// Model at the given ranks from the max-rank search model (leading components).
vit::VitModel truncate_model(const vit::VitModel& search_model, std::span<const RankCandidates> candidates,
                             std::span<const std::size_t> ranks);

// Largest uniform keep-fraction plan whose site parameters fit the budget:
// attention ranks round(f * head_dim), FFN ranks round(f * min(d_model, ffn_dim)).
CompressionPlan uniform_plan_for_budget(const ModelConfig& config, double budget);

SearchResult run_search(const vit::VitModel& dense, std::span<const trainer::Sample> train,
                        std::span<const trainer::Sample> test, const SearchConfig& config,
                        const std::function<void(const TraceRow&)>& on_row = {});

}  // namespace comcat::ranksearch
