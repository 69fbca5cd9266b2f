#include "vit/graph.hpp"

#include <cmath>

#include "util/error.hpp"

namespace comcat::vit {

std::string SiteKey::id() const {
  const std::string b = "b" + std::to_string(block) + ".";
  switch (kind) {
    case Kind::kQK: return b + "h" + std::to_string(head) + ".qk";
    case Kind::kVO: return b + "h" + std::to_string(head) + ".vo";
    case Kind::kFfn1: return b + "ffn1";
    case Kind::kFfn2: return b + "ffn2";
  }
  return b + "?";
}

NodeId ModelGraph::tensor(const std::string& name, const Matrix& value) {
  const NodeId id =
      options_.model_trainable ? tape_.parameter(name, value) : tape_.input(value, name);
  tensors_.emplace(name, id);
  return id;
}

NodeId ModelGraph::linear(const std::string& name, const LinearWeight& w, NodeId x,
                          const std::optional<SiteKey>& site) {
  if (auto* dense = std::get_if<Matrix>(&w)) return tape_.matmul(x, tensor(name, *dense));
  const auto& f = std::get<FactorPair>(w);
  const NodeId u = tensor(name + ".u", f.u);
  const NodeId s = tensor(name + ".s", f.s);
  NodeId projected = tape_.matmul(x, u);
  if (site && options_.hooks.site_mask)
    if (auto mask = options_.hooks.site_mask(tape_, *site))
      projected = tape_.scale_columns(projected, *mask);
  return tape_.matmul(projected, s);
}

ModelGraph::ModelGraph(const VitModel& model, GraphOptions options)
    : config_(model.config), options_(std::move(options)) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));
  patches_ = tape_.input(Matrix(config_.seq_len(), config_.patch_features()), "patches");
  NodeId x = tape_.add(tape_.matmul(patches_, tensor("embed", model.embed)), tensor("pos", model.pos));

  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const Block& blk = model.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    const NodeId h = tape_.layernorm(x, tensor(p + "ln1.gain", blk.ln1.gain),
                                     tensor(p + "ln1.bias", blk.ln1.bias));
    std::optional<NodeId> attn;
    if (options_.hooks.attention) attn = options_.hooks.attention(tape_, b, h);
    if (!attn) {
      auto mask = [&](SiteKey::Kind kind, std::size_t head) -> std::optional<NodeId> {
        if (!options_.hooks.site_mask) return std::nullopt;
        return options_.hooks.site_mask(tape_, SiteKey{b, head, kind});
      };
      std::optional<NodeId> sum;
      if (blk.form == MhaForm::kLowRank) {
        for (std::size_t i = 0; i < blk.low_rank.heads.size(); ++i) {
          const auto& hw = blk.low_rank.heads[i];
          const std::string q = p + "attn." + std::to_string(i) + ".";
          NodeId qu = tape_.matmul(h, tensor(q + "uq", hw.uq));
          if (auto m = mask(SiteKey::Kind::kQK, i)) qu = tape_.scale_columns(qu, *m);
          const NodeId ks = tape_.matmul(h, tensor(q + "sk", hw.sk));
          const NodeId a = tape_.softmax_rows(tape_.scale(tape_.matmul(qu, ks, false, true), inv_sqrt_d));
          NodeId vu = tape_.matmul(h, tensor(q + "uv", hw.uv));
          if (auto m = mask(SiteKey::Kind::kVO, i)) vu = tape_.scale_columns(vu, *m);
          const NodeId out = tape_.matmul(tape_.matmul(a, vu), tensor(q + "so", hw.so));
          sum = sum ? tape_.add(*sum, out) : out;
        }
      } else if (blk.form == MhaForm::kStandard) {
        for (std::size_t i = 0; i < blk.mha.heads.size(); ++i) {
          const auto& hw = blk.mha.heads[i];
          const std::string q = p + "attn." + std::to_string(i) + ".";
          const NodeId qh = tape_.matmul(h, tensor(q + "wq", hw.wq));
          const NodeId kh = tape_.matmul(h, tensor(q + "wk", hw.wk));
          const NodeId vh = tape_.matmul(h, tensor(q + "wv", hw.wv));
          const NodeId a = tape_.softmax_rows(tape_.scale(tape_.matmul(qh, kh, false, true), inv_sqrt_d));
          const NodeId out = tape_.matmul(tape_.matmul(a, vh), tensor(q + "wo", hw.wo));
          sum = sum ? tape_.add(*sum, out) : out;
        }
      } else {
        throw ContractError("combined attention form has no trainable graph; use standard");
      }
      attn = *sum;
    }
    x = tape_.add(x, *attn);

    const NodeId h2 = tape_.layernorm(x, tensor(p + "ln2.gain", blk.ln2.gain),
                                      tensor(p + "ln2.bias", blk.ln2.bias));
    NodeId f = linear(p + "ffn.w1", blk.ffn.w1, h2, SiteKey{b, 0, SiteKey::Kind::kFfn1});
    f = tape_.gelu(tape_.add(f, tensor(p + "ffn.b1", blk.ffn.b1)));
    f = linear(p + "ffn.w2", blk.ffn.w2, f, SiteKey{b, 0, SiteKey::Kind::kFfn2});
    f = tape_.add(f, tensor(p + "ffn.b2", blk.ffn.b2));
    x = tape_.add(x, f);
  }

  Matrix selector(1, config_.seq_len());
  selector(0, 0) = 1.0;
  const NodeId cls = tape_.matmul(tape_.input(std::move(selector), "cls_selector"), x);
  const NodeId normed = tape_.layernorm(cls, tensor("final_ln.gain", model.final_ln.gain),
                                        tensor("final_ln.bias", model.final_ln.bias));
  logits_ = tape_.add(tape_.matmul(normed, tensor("head.w", model.head_w)),
                      tensor("head.b", model.head_b));
  ce_ = tape_.cross_entropy(logits_, {0}, options_.label_smoothing);
}

void ModelGraph::bind(const Matrix& image, int label) {
  tape_.set_value(patches_, patch_matrix(config_, image));
  const int labels[1] = {label};
  tape_.set_labels(ce_, labels);
}

void ModelGraph::load_weights(const VitModel& model) {
  visit_tensors(model, [&](const std::string& name, const Matrix& m) {
    auto it = tensors_.find(name);
    if (it != tensors_.end()) tape_.set_value(it->second, m);
  });
}

}  // namespace comcat::vit
