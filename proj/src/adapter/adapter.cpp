#include "adapter/adapter.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "trainer/engine.hpp"
#include "trainer/optim.hpp"
#include "trainer/train.hpp"
#include "util/error.hpp"
#include "util/rng.hpp"
#include "vit/graph.hpp"

namespace comcat::adapter {

using linalg::matmul;
using linalg::matmul_nt;

std::size_t AdapterWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& blk : blocks)
    for (const auto& h : blk) n += h.uq.size() + h.sk.size() + h.uv.size() + h.so.size();
  return n;
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal(0.0, stddev);
  return m;
}

std::string tensor_prefix(std::size_t block, std::size_t head) {
  return "blocks." + std::to_string(block) + ".attn." + std::to_string(head) + ".";
}

void require_dense(const VitModel& base) {
  for (const auto& blk : base.blocks)
    if (blk.form == vit::MhaForm::kLowRank)
      throw ContractError("adapters attach to dense attention; the base model has low-rank blocks");
}

void require_matching(const VitModel& base, const AdapterWeights& adapter) {
  if (adapter.blocks.size() != base.blocks.size())
    throw ShapeError("adapter has " + std::to_string(adapter.blocks.size()) + " blocks, base has " +
                     std::to_string(base.blocks.size()));
  for (std::size_t b = 0; b < base.blocks.size(); ++b)
    if (adapter.blocks[b].size() != base.blocks[b].mha.heads.size())
      throw ShapeError("adapter block " + std::to_string(b) + " head count does not match the base");
}

}  // namespace

AdapterWeights init_adapter(const ModelConfig& config, std::size_t rank, std::uint64_t seed, AdapterInit init) {
  config.validate();
  if (rank == 0 || rank > config.d_model)
    throw RankRangeError("adapter rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(config.d_model) + "]");
  Rng rng(seed);
  const std::size_t dm = config.d_model;
  AdapterWeights a;
  a.rank = rank;
  a.blocks.resize(config.blocks);
  for (auto& blk : a.blocks)
    for (std::size_t i = 0; i < config.heads; ++i) {
      AdapterHead h;
      h.uq = gaussian(rng, dm, rank, init.stddev);
      h.uv = gaussian(rng, dm, rank, init.stddev);
      h.sk = init.random_second ? gaussian(rng, dm, rank, init.stddev) : Matrix(dm, rank);
      h.so = init.random_second ? gaussian(rng, rank, dm, init.stddev) : Matrix(rank, dm);
      blk.push_back(std::move(h));
    }
  return a;
}

Matrix adapter_forward(const Matrix& xq, const Matrix& xk, const Matrix& xv, const vit::MhaWeights& base,
                       std::span<const AdapterHead> heads) {
  if (base.heads.empty()) throw ShapeError("attention without heads");
  if (heads.size() != base.heads.size())
    throw ShapeError("adapter has " + std::to_string(heads.size()) + " heads, base has " +
                     std::to_string(base.heads.size()));
  const std::size_t dm = base.heads.front().wq.rows();
  const std::size_t d = base.heads.front().wq.cols();
  if (xq.cols() != dm || xk.cols() != dm || xv.cols() != dm || xk.rows() != xv.rows())
    throw ShapeError("attention inputs " + xq.shape_string() + ", " + xk.shape_string() + ", " +
                     xv.shape_string() + " do not fit d_model " + std::to_string(dm));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto& hw = base.heads[i];
    const auto& ad = heads[i];
    if (ad.uq.rows() != dm || ad.sk.rows() != dm || ad.uv.rows() != dm || ad.so.cols() != dm ||
        ad.uq.cols() != ad.sk.cols() || ad.uv.cols() != ad.so.rows())
      throw ShapeError("adapter head " + std::to_string(i) + " factors have inconsistent shapes");
    Matrix scores = linalg::add(matmul_nt(matmul(xq, matmul_nt(hw.wq, hw.wk)), xk),
                                matmul_nt(matmul(xq, ad.uq), matmul(xk, ad.sk)));
    for (double& v : scores.data()) v *= inv_sqrt_d;
    const Matrix values =
        linalg::add(matmul(xv, matmul(hw.wv, hw.wo)), matmul(matmul(xv, ad.uv), ad.so));
    Matrix term = matmul(vit::softmax_rows(scores), values);
    if (out.empty()) {
      out = std::move(term);
    } else {
      for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] += term.data()[k];
    }
  }
  return out;
}

Matrix adapted_forward_one(const VitModel& base, const AdapterWeights& adapter, const Matrix& image) {
  require_dense(base);
  require_matching(base, adapter);
  Matrix x = linalg::add(matmul(vit::patch_matrix(base.config, image), base.embed), base.pos);
  for (std::size_t b = 0; b < base.blocks.size(); ++b) {
    const auto& blk = base.blocks[b];
    const Matrix h = vit::layer_norm(x, blk.ln1);
    x = linalg::add(x, adapter_forward(h, h, h, blk.mha, adapter.blocks[b]));
    x = linalg::add(x, vit::ffn_forward(vit::layer_norm(x, blk.ln2), blk.ffn));
  }
  const Matrix cls = vit::layer_norm(x.row_block(0, 1), base.final_ln);
  return linalg::add(matmul(cls, base.head_w), base.head_b);
}

double adapted_accuracy(const VitModel& base, const AdapterWeights& adapter,
                        std::span<const trainer::Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples)
    hits += trainer::argmax_row(adapted_forward_one(base, adapter, s.image).row(0)) == s.label;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

namespace {

double dataset_loss(const VitModel& base, const AdapterWeights& adapter, std::span<const trainer::Sample> data) {
  double total = 0.0;
  for (const auto& s : data) {
    const int label = s.label;
    total += trainer::cross_entropy(adapted_forward_one(base, adapter, s.image), std::span<const int>(&label, 1));
  }
  return total / static_cast<double>(data.size());
}

}  // namespace

std::unique_ptr<vit::ModelGraph> adapter_graph(const VitModel& base, const AdapterWeights& adapter) {
  require_dense(base);
  require_matching(base, adapter);
  // Combined matrices of the frozen base.
  std::vector<std::vector<std::pair<Matrix, Matrix>>> combined(base.blocks.size());
  for (std::size_t b = 0; b < base.blocks.size(); ++b)
    for (const auto& hw : base.blocks[b].mha.heads)
      combined[b].emplace_back(matmul_nt(hw.wq, hw.wk), matmul(hw.wv, hw.wo));

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(base.config.head_dim()));
  vit::GraphOptions options;
  options.model_trainable = false;
  options.hooks.attention = [&adapter, combined = std::move(combined), inv_sqrt_d](
                                vit::Tape& tape, std::size_t b, vit::NodeId h) -> std::optional<vit::NodeId> {
    std::optional<vit::NodeId> sum;
    for (std::size_t i = 0; i < adapter.blocks[b].size(); ++i) {
      const auto& head = adapter.blocks[b][i];
      const std::string p = "adapter." + tensor_prefix(b, i);
      const auto wqk = tape.input(combined[b][i].first, "wqk");
      const auto wvo = tape.input(combined[b][i].second, "wvo");
      const auto uq = tape.parameter(p + "uq", head.uq);
      const auto sk = tape.parameter(p + "sk", head.sk);
      const auto uv = tape.parameter(p + "uv", head.uv);
      const auto so = tape.parameter(p + "so", head.so);
      const auto frozen_scores = tape.matmul(tape.matmul(h, wqk), h, false, true);
      const auto extra_scores = tape.matmul(tape.matmul(h, uq), tape.matmul(h, sk), false, true);
      const auto a = tape.softmax_rows(tape.scale(tape.add(frozen_scores, extra_scores), inv_sqrt_d));
      const auto values = tape.add(tape.matmul(h, wvo), tape.matmul(tape.matmul(h, uv), so));
      const auto out = tape.matmul(a, values);
      sum = sum ? tape.add(*sum, out) : out;
    }
    return sum;
  };
  return std::make_unique<vit::ModelGraph>(base, std::move(options));
}

AdaptResult adapt(const VitModel& base, std::span<const trainer::Sample> data, const AdaptConfig& config) {
  require_dense(base);
  if (data.empty()) throw ContractError("adapt: empty adaptation set");
  if (config.batch_size == 0) throw ContractError("adapt: batch size must be positive");

  AdaptResult result;
  result.adapter = init_adapter(base.config, config.rank, config.seed, config.init);
  AdapterWeights& ad = result.adapter;
  result.initial_loss = dataset_loss(base, ad, data);

  std::vector<std::string> names;
  std::vector<Matrix*> targets;
  for (std::size_t b = 0; b < ad.blocks.size(); ++b)
    for (std::size_t i = 0; i < ad.blocks[b].size(); ++i) {
      auto& h = ad.blocks[b][i];
      const std::string p = "adapter." + tensor_prefix(b, i);
      for (auto [suffix, m] : {std::pair{"uq", &h.uq}, {"sk", &h.sk}, {"uv", &h.uv}, {"so", &h.so}}) {
        names.push_back(p + suffix);
        targets.push_back(m);
      }
    }

  trainer::GraphPool pool(
      [&] {
        auto g = adapter_graph(base, ad);
        const auto loss = g->cross_entropy();
        return trainer::SampleGraph{std::move(g), loss};
      },
      names);
  trainer::Adam adam(targets, trainer::AdamConfig{});
  std::vector<const Matrix*> views(targets.begin(), targets.end());

  Rng rng(config.seed ^ 0xa0761d6478bd642fULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<const trainer::Sample*> batch;
  for (std::size_t step = 0; step < config.steps; ++step) {
    batch.clear();
    while (batch.size() < config.batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    pool.set_trainable_values(views);
    const trainer::BatchResult r = pool.run(batch, true);
    if (!std::isfinite(r.loss))
      throw DivergenceError("adaptation diverged at step " + std::to_string(step + 1));
    result.loss_curve.push_back(r.loss);
    adam.step(r.grads, config.lr);
  }
  result.final_loss = config.steps ? dataset_loss(base, ad, data) : result.initial_loss;
  return result;
}

std::vector<trainer::Sample> customization_set(std::span<const trainer::Sample> samples, int holdout) {
  std::vector<trainer::Sample> out;
  std::map<int, std::vector<const trainer::Sample*>> others;
  for (const auto& s : samples) {
    if (s.label == holdout)
      out.push_back(s);
    else
      others[s.label].push_back(&s);
  }
  if (out.empty()) throw ContractError("customization set: no samples of class " + std::to_string(holdout));
  const std::size_t want = out.size();
  std::size_t taken = 0;
  for (std::size_t k = 0; taken < want; ++k) {
    bool any = false;
    for (auto& [label, list] : others) {
      if (k >= list.size() || taken == want) continue;
      out.push_back(*list[k]);
      ++taken;
      any = true;
    }
    if (!any) break;
  }
  return out;
}

io::Container adapter_container(const ModelConfig& config, const AdapterWeights& adapter,
                                const std::string& base_checksum) {
  io::Container c;
  c.kind = "adapter";
  c.config = io::config_to_json(config);
  c.base_checksum = base_checksum;
  c.extra["rank"] = adapter.rank;
  for (std::size_t b = 0; b < adapter.blocks.size(); ++b)
    for (std::size_t i = 0; i < adapter.blocks[b].size(); ++i) {
      const auto& h = adapter.blocks[b][i];
      const std::string p = tensor_prefix(b, i);
      c.tensors[p + "uq"] = h.uq;
      c.tensors[p + "sk"] = h.sk;
      c.tensors[p + "uv"] = h.uv;
      c.tensors[p + "so"] = h.so;
    }
  return c;
}

AdapterWeights adapter_from_container(const io::Container& c) {
  if (c.kind != "adapter") throw ParseError("expected an adapter container, found kind '" + c.kind + "'");
  const ModelConfig config = io::config_from_json(c.config);
  if (!c.extra.contains("rank")) throw ParseError("adapter container has no rank");
  AdapterWeights a;
  a.rank = c.extra.at("rank").get<std::size_t>();
  a.blocks.resize(config.blocks);
  auto get = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ParseError("adapter container is missing tensor '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols)
      throw ParseError("adapter tensor '" + name + "' has shape " + it->second.shape_string());
    return it->second;
  };
  const std::size_t dm = config.d_model;
  for (std::size_t b = 0; b < config.blocks; ++b)
    for (std::size_t i = 0; i < config.heads; ++i) {
      const std::string p = tensor_prefix(b, i);
      a.blocks[b].push_back(AdapterHead{get(p + "uq", dm, a.rank), get(p + "sk", dm, a.rank),
                                        get(p + "uv", dm, a.rank), get(p + "so", a.rank, dm)});
    }
  if (c.tensors.size() != 4 * config.blocks * config.heads)
    throw ParseError("adapter container holds unexpected tensors");
  return a;
}

std::string write_adapter(const std::filesystem::path& path, const ModelConfig& config,
                          const AdapterWeights& adapter, const std::string& base_checksum) {
  return io::write_container(path, adapter_container(config, adapter, base_checksum));
}

AdapterWeights read_adapter(const std::filesystem::path& path, const std::string& base_checksum) {
  const io::Container c = io::read_container(path);
  if (!c.base_checksum) throw ParseError(path.string() + ": adapter is not bound to a base model");
  if (*c.base_checksum != base_checksum)
    throw ParseError(path.string() + ": adapter was trained against base " + *c.base_checksum +
                     ", given base has checksum " + base_checksum);
  return adapter_from_container(c);
}

}  // namespace comcat::adapter
