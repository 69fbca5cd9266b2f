#include "vit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "util/error.hpp"
#include "util/rng.hpp"

namespace comcat::vit {

using linalg::matmul;
using linalg::matmul_nt;

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || blocks == 0 || ffn_dim == 0 || classes == 0 ||
      image_side == 0 || patch_side == 0)
    throw ContractError("model config: all dimensions must be positive");
  if (d_model % heads != 0) throw ContractError("model config: d_model must be divisible by heads");
  if (image_side % patch_side != 0)
    throw ContractError("model config: image_side must be divisible by patch_side");
}

const char* form_name(MhaForm form) {
  switch (form) {
    case MhaForm::kStandard: return "standard";
    case MhaForm::kCombined: return "combined";
    case MhaForm::kLowRank: return "lowrank";
  }
  return "?";
}

MhaForm parse_form(const std::string& name) {
  if (name == "standard") return MhaForm::kStandard;
  if (name == "combined") return MhaForm::kCombined;
  if (name == "lowrank") return MhaForm::kLowRank;
  throw ParseError("unknown attention form '" + name + "'");
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal(0.0, stddev);
  return m;
}

LayerNormWeights unit_layer_norm(std::size_t d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }

}  // namespace

VitModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t dm = config.d_model, d = config.head_dim();
  VitModel m;
  m.config = config;
  m.embed = Matrix(config.patch_features(), dm);
  for (std::size_t j = 0; j < dm; ++j) m.embed(0, j) = rng.normal(0.0, 0.02);
  const double patch_std = 1.0 / std::sqrt(static_cast<double>(config.patch_pixels()));
  for (std::size_t i = 1; i < m.embed.rows(); ++i)
    for (std::size_t j = 0; j < dm; ++j) m.embed(i, j) = rng.normal(0.0, patch_std);
  m.pos = gaussian(rng, config.seq_len(), dm, 0.02);

  const double proj_std = 1.0 / std::sqrt(static_cast<double>(dm));
  const double ffn_out_std = 1.0 / std::sqrt(static_cast<double>(config.ffn_dim));
  for (std::size_t b = 0; b < config.blocks; ++b) {
    Block blk;
    blk.ln1 = unit_layer_norm(dm);
    blk.ln2 = unit_layer_norm(dm);
    for (std::size_t h = 0; h < config.heads; ++h) {
      HeadWeights hw;
      hw.wq = gaussian(rng, dm, d, proj_std);
      hw.wk = gaussian(rng, dm, d, proj_std);
      hw.wv = gaussian(rng, dm, d, proj_std);
      hw.wo = gaussian(rng, d, dm, proj_std);
      blk.mha.heads.push_back(std::move(hw));
    }
    blk.ffn.w1 = gaussian(rng, dm, config.ffn_dim, proj_std);
    blk.ffn.b1 = Matrix(1, config.ffn_dim);
    blk.ffn.w2 = gaussian(rng, config.ffn_dim, dm, ffn_out_std);
    blk.ffn.b2 = Matrix(1, dm);
    m.blocks.push_back(std::move(blk));
  }
  m.final_ln = unit_layer_norm(dm);
  m.head_w = gaussian(rng, dm, config.classes, 0.02);
  m.head_b = Matrix(1, config.classes);
  return m;
}

namespace {

template <typename Model, typename Fn>
void visit_impl(Model& m, Fn&& fn) {
  fn("embed", m.embed);
  fn("pos", m.pos);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    fn(p + "ln1.gain", blk.ln1.gain);
    fn(p + "ln1.bias", blk.ln1.bias);
    if (blk.form == MhaForm::kLowRank) {
      for (std::size_t h = 0; h < blk.low_rank.heads.size(); ++h) {
        auto& hw = blk.low_rank.heads[h];
        const std::string q = p + "attn." + std::to_string(h) + ".";
        fn(q + "uq", hw.uq);
        fn(q + "sk", hw.sk);
        fn(q + "uv", hw.uv);
        fn(q + "so", hw.so);
      }
    } else {
      for (std::size_t h = 0; h < blk.mha.heads.size(); ++h) {
        auto& hw = blk.mha.heads[h];
        const std::string q = p + "attn." + std::to_string(h) + ".";
        fn(q + "wq", hw.wq);
        fn(q + "wk", hw.wk);
        fn(q + "wv", hw.wv);
        fn(q + "wo", hw.wo);
      }
    }
    fn(p + "ln2.gain", blk.ln2.gain);
    fn(p + "ln2.bias", blk.ln2.bias);
    auto linear = [&](const std::string& name, auto& w) {
      if (auto* dense = std::get_if<Matrix>(&w)) {
        fn(name, *dense);
      } else {
        auto& f = std::get<FactorPair>(w);
        fn(name + ".u", f.u);
        fn(name + ".s", f.s);
      }
    };
    linear(p + "ffn.w1", blk.ffn.w1);
    fn(p + "ffn.b1", blk.ffn.b1);
    linear(p + "ffn.w2", blk.ffn.w2);
    fn(p + "ffn.b2", blk.ffn.b2);
  }
  fn("final_ln.gain", m.final_ln.gain);
  fn("final_ln.bias", m.final_ln.bias);
  fn("head.w", m.head_w);
  fn("head.b", m.head_b);
}

}  // namespace

void visit_tensors(VitModel& model, const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_impl(model, fn);
}

void visit_tensors(const VitModel& model,
                   const std::function<void(const std::string&, const Matrix&)>& fn) {
  visit_impl(model, fn);
}

std::size_t parameter_count(const VitModel& model) {
  std::size_t total = 0;
  visit_tensors(model, [&](const std::string&, const Matrix& m) { total += m.size(); });
  return total;
}

Matrix linear_product(const LinearWeight& w) {
  if (auto* dense = std::get_if<Matrix>(&w)) return *dense;
  return std::get<FactorPair>(w).product();
}

std::size_t linear_parameter_count(const LinearWeight& w) {
  if (auto* dense = std::get_if<Matrix>(&w)) return dense->size();
  return std::get<FactorPair>(w).parameter_count();
}

Matrix apply_linear(const Matrix& x, const LinearWeight& w) {
  if (auto* dense = std::get_if<Matrix>(&w)) return matmul(x, *dense);
  const auto& f = std::get<FactorPair>(w);
  return matmul(matmul(x, f.u), f.s);
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) total += o[j] = std::exp(in[j] - mx);
    for (double& v : o) v /= total;
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const LayerNormWeights& ln) {
  const std::size_t c = x.cols();
  Matrix out(x.rows(), c);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    auto o = out.row(i);
    for (std::size_t j = 0; j < c; ++j) o[j] = ((in[j] - mu) * inv) * ln.gain(0, j) + ln.bias(0, j);
  }
  return out;
}

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return out;
}

namespace {

void check_inputs(const Matrix& xq, const Matrix& xk, const Matrix& xv, std::size_t dm) {
  if (xq.cols() != dm || xk.cols() != dm || xv.cols() != dm)
    throw ShapeError("attention inputs must have " + std::to_string(dm) + " columns, got " +
                     xq.shape_string() + ", " + xk.shape_string() + ", " + xv.shape_string());
  if (xk.rows() != xv.rows())
    throw ShapeError("key and value inputs differ in length: " + xk.shape_string() + " vs " +
                     xv.shape_string());
}

void scale_in_place(Matrix& m, double s) {
  for (double& v : m.data()) v *= s;
}

void accumulate(Matrix& acc, const Matrix& term) {
  if (acc.empty()) {
    acc = term;
    return;
  }
  auto a = acc.data();
  auto t = term.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += t[i];
}

}  // namespace

Matrix mha_standard(const Matrix& xq, const Matrix& xk, const Matrix& xv, const MhaWeights& w) {
  if (w.heads.empty()) throw ShapeError("attention without heads");
  const std::size_t dm = w.heads.front().wq.rows();
  const std::size_t d = w.heads.front().wq.cols();
  check_inputs(xq, xk, xv, dm);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Matrix> heads;
  std::vector<Matrix> wo_parts;
  for (const auto& hw : w.heads) {
    Matrix scores = matmul_nt(matmul(xq, hw.wq), matmul(xk, hw.wk));
    scale_in_place(scores, inv_sqrt_d);
    heads.push_back(matmul(softmax_rows(scores), matmul(xv, hw.wv)));
    wo_parts.push_back(hw.wo);
  }
  return matmul(linalg::hstack(heads), linalg::vstack(wo_parts));
}

Matrix mha_combined(const Matrix& xq, const Matrix& xk, const Matrix& xv, const MhaWeights& w) {
  if (w.heads.empty()) throw ShapeError("attention without heads");
  const std::size_t dm = w.heads.front().wq.rows();
  const std::size_t d = w.heads.front().wq.cols();
  check_inputs(xq, xk, xv, dm);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out;
  for (const auto& hw : w.heads) {
    const Matrix wqk = matmul_nt(hw.wq, hw.wk);
    const Matrix wvo = matmul(hw.wv, hw.wo);
    Matrix scores = matmul_nt(matmul(xq, wqk), xk);
    scale_in_place(scores, inv_sqrt_d);
    accumulate(out, matmul(softmax_rows(scores), matmul(xv, wvo)));
  }
  return out;
}

Matrix mha_lowrank(const Matrix& xq, const Matrix& xk, const Matrix& xv,
                   const LowRankMhaWeights& w, std::size_t head_dim) {
  if (w.heads.empty()) throw ShapeError("attention without heads");
  const std::size_t dm = w.heads.front().uq.rows();
  check_inputs(xq, xk, xv, dm);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix out;
  for (const auto& hw : w.heads) {
    if (hw.sk.rows() != dm || hw.uv.rows() != dm || hw.so.cols() != dm ||
        hw.sk.cols() != hw.uq.cols() || hw.so.rows() != hw.uv.cols())
      throw ShapeError("low-rank head factors have inconsistent shapes");
    Matrix scores = matmul_nt(matmul(xq, hw.uq), matmul(xk, hw.sk));
    scale_in_place(scores, inv_sqrt_d);
    accumulate(out, matmul(matmul(softmax_rows(scores), matmul(xv, hw.uv)), hw.so));
  }
  return out;
}

Matrix ffn_forward(const Matrix& x, const FfnWeights& f) {
  Matrix hidden = gelu(linalg::add_row(apply_linear(x, f.w1), f.b1));
  return linalg::add_row(apply_linear(hidden, f.w2), f.b2);
}

Matrix patch_matrix(const ModelConfig& config, const Matrix& image) {
  if (image.rows() != config.image_side || image.cols() != config.image_side)
    throw ShapeError("image is " + image.shape_string() + ", model expects " +
                     std::to_string(config.image_side) + "x" + std::to_string(config.image_side));
  const std::size_t per_side = config.image_side / config.patch_side;
  const std::size_t ps = config.patch_side;
  Matrix out(config.seq_len(), config.patch_features());
  out(0, 0) = 1.0;
  for (std::size_t pr = 0; pr < per_side; ++pr)
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      const std::size_t token = 1 + pr * per_side + pc;
      for (std::size_t r = 0; r < ps; ++r)
        for (std::size_t c = 0; c < ps; ++c)
          out(token, 1 + r * ps + c) = image(pr * ps + r, pc * ps + c);
    }
  return out;
}

namespace {

Matrix attention(const Block& blk, const Matrix& h, std::size_t head_dim) {
  switch (blk.form) {
    case MhaForm::kStandard: return mha_standard(h, h, h, blk.mha);
    case MhaForm::kCombined: return mha_combined(h, h, h, blk.mha);
    case MhaForm::kLowRank: return mha_lowrank(h, h, h, blk.low_rank, head_dim);
  }
  throw ContractError("unknown attention form");
}

}  // namespace

Matrix forward_one(const VitModel& model, const Matrix& image) {
  Matrix x = linalg::add(matmul(patch_matrix(model.config, image), model.embed), model.pos);
  const std::size_t d = model.config.head_dim();
  for (const auto& blk : model.blocks) {
    x = linalg::add(x, attention(blk, layer_norm(x, blk.ln1), d));
    x = linalg::add(x, ffn_forward(layer_norm(x, blk.ln2), blk.ffn));
  }
  const Matrix cls = layer_norm(x.row_block(0, 1), model.final_ln);
  return linalg::add(matmul(cls, model.head_w), model.head_b);
}

Matrix model_forward(const VitModel& model, std::span<const Matrix> images) {
  Matrix logits(images.size(), model.config.classes);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Matrix row = forward_one(model, images[i]);
    std::copy(row.data().begin(), row.data().end(), logits.row(i).begin());
  }
  return logits;
}

void set_form(VitModel& model, MhaForm form) {
  for (auto& blk : model.blocks) {
    if (blk.form == MhaForm::kLowRank || form == MhaForm::kLowRank)
      throw ContractError("set_form switches between standard and combined dense forms only");
    blk.form = form;
  }
}

}  // namespace comcat::vit
