#include "autodiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "util/error.hpp"

namespace comcat::autodiff {

using linalg::matmul_acc;
using linalg::matmul_into;
using linalg::matmul_nt_acc;
using linalg::matmul_nt_into;
using linalg::matmul_tn_acc;
using linalg::matmul_tn_into;

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParameter: return "parameter";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kWeightedSum: return "weighted_sum";
    case Op::kLayerNorm: return "layernorm";
    case Op::kGelu: return "gelu";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kPowScalar: return "pow_scalar";
    case Op::kMean: return "mean";
    case Op::kScaleColumns: return "scale_columns";
  }
  return "?";
}

std::string Tape::describe(std::size_t index) const {
  std::string s = "node " + std::to_string(index) + " (" + op_name(nodes_[index].op);
  if (!nodes_[index].name.empty()) s += " '" + nodes_[index].name + "'";
  return s + ")";
}

NodeId Tape::push(Node node) {
  for (NodeId p : node.parents) {
    if (p.index >= nodes_.size()) throw ContractError("parent node does not exist");
    node.needs_grad = node.needs_grad || nodes_[p.index].needs_grad;
  }
  nodes_.push_back(std::move(node));
  const std::size_t index = nodes_.size() - 1;
  try {
    evaluate(nodes_[index]);
  } catch (const ShapeError& e) {
    nodes_.pop_back();
    throw ShapeError(describe(index) + ": " + e.what());
  } catch (...) {
    nodes_.pop_back();
    throw;
  }
  return NodeId{static_cast<std::uint32_t>(index)};
}

NodeId Tape::input(Matrix value, std::string name) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Tape::parameter(const std::string& name, Matrix value) {
  if (params_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  Node n;
  n.op = Op::kParameter;
  n.value = std::move(value);
  n.name = name;
  n.needs_grad = true;
  const NodeId id = push(std::move(n));
  params_.emplace(name, id);
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
  if (transpose_a && transpose_b) throw ContractError("matmul: at most one transposed operand");
  Node n;
  n.op = Op::kMatMul;
  n.parents = {a, b};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kAdd;
  n.parents = {a, b};
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.parents = {a};
  n.constant = factor;
  return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a) {
  Node n;
  n.op = Op::kSoftmaxRows;
  n.parents = {a};
  return push(std::move(n));
}

NodeId Tape::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Node n;
  n.op = Op::kConcatCols;
  n.parents.assign(parts.begin(), parts.end());
  return push(std::move(n));
}

NodeId Tape::weighted_sum(NodeId weights, std::span<const NodeId> branches) {
  if (branches.empty()) throw ContractError("weighted_sum: no branches");
  Node n;
  n.op = Op::kWeightedSum;
  n.parents.push_back(weights);
  n.parents.insert(n.parents.end(), branches.begin(), branches.end());
  return push(std::move(n));
}

NodeId Tape::layernorm(NodeId x, NodeId gain, NodeId bias) {
  Node n;
  n.op = Op::kLayerNorm;
  n.parents = {x, gain, bias};
  return push(std::move(n));
}

NodeId Tape::gelu(NodeId x) {
  Node n;
  n.op = Op::kGelu;
  n.parents = {x};
  return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::vector<int> labels, double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw ContractError("cross_entropy: label smoothing must lie in [0, 1)");
  Node n;
  n.op = Op::kCrossEntropy;
  n.parents = {logits};
  n.labels = std::move(labels);
  n.constant = smoothing;
  return push(std::move(n));
}

NodeId Tape::pow_scalar(NodeId x, double exponent) {
  Node n;
  n.op = Op::kPowScalar;
  n.parents = {x};
  n.constant = exponent;
  return push(std::move(n));
}

NodeId Tape::mean(NodeId x) {
  Node n;
  n.op = Op::kMean;
  n.parents = {x};
  return push(std::move(n));
}

NodeId Tape::scale_columns(NodeId x, NodeId row) {
  Node n;
  n.op = Op::kScaleColumns;
  n.parents = {x, row};
  return push(std::move(n));
}

void Tape::set_value(NodeId leaf, const Matrix& value) {
  Matrix& target = leaf_value(leaf);
  if (target.rows() != value.rows() || target.cols() != value.cols())
    throw ShapeError(describe(leaf.index) + ": rebinding " + target.shape_string() + " with " +
                     value.shape_string());
  std::copy(value.data().begin(), value.data().end(), target.data().begin());
}

Matrix& Tape::leaf_value(NodeId leaf) {
  Node& n = nodes_.at(leaf.index);
  if (n.op != Op::kInput && n.op != Op::kParameter)
    throw ContractError(describe(leaf.index) + " is not a leaf");
  return n.value;
}

void Tape::set_labels(NodeId id, std::span<const int> labels) {
  Node& n = nodes_.at(id.index);
  if (n.op != Op::kCrossEntropy) throw ContractError(describe(id.index) + " has no labels");
  n.labels.assign(labels.begin(), labels.end());
}

void Tape::set_trainable(NodeId id, bool trainable) {
  Node& n = nodes_.at(id.index);
  if (n.op != Op::kParameter) throw ContractError(describe(id.index) + " is not a parameter");
  n.trainable = trainable;
  for (Node& node : nodes_) {
    if (node.op == Op::kParameter) {
      node.needs_grad = node.trainable;
      continue;
    }
    node.needs_grad = false;
    for (NodeId p : node.parents) node.needs_grad = node.needs_grad || nodes_[p.index].needs_grad;
  }
}

std::optional<NodeId> Tape::find_parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) return std::nullopt;
  return it->second;
}

const Matrix& Tape::forward(NodeId output) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    try {
      evaluate(nodes_[i]);
    } catch (const ShapeError& e) {
      throw ShapeError(describe(i) + ": " + e.what());
    }
  }
  return nodes_.at(output.index).value;
}

namespace {

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void add_into(Matrix& dst, const Matrix& src, double factor = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

}  // namespace

void Tape::evaluate(Node& n) {
  auto val = [&](std::size_t k) -> const Matrix& { return nodes_[n.parents[k].index].value; };
  switch (n.op) {
    case Op::kInput:
    case Op::kParameter:
      break;
    case Op::kMatMul:
      if (n.transpose_a)
        matmul_tn_into(n.value, val(0), val(1));
      else if (n.transpose_b)
        matmul_nt_into(n.value, val(0), val(1));
      else
        matmul_into(n.value, val(0), val(1));
      break;
    case Op::kAdd: {
      const Matrix& a = val(0);
      const Matrix& b = val(1);
      const bool row_bias = b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
      if (!row_bias) linalg::require_same_shape(a, b, "add");
      n.value.resize(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = n.value.row(i);
        auto ra = a.row(i);
        auto rb = row_bias ? b.row(0) : b.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = ra[j] + rb[j];
      }
      break;
    }
    case Op::kScale: {
      const Matrix& a = val(0);
      n.value.resize(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) n.value.data()[i] = a.data()[i] * n.constant;
      break;
    }
    case Op::kSoftmaxRows: {
      const Matrix& a = val(0);
      n.value.resize(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto in = a.row(i);
        auto out = n.value.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) total += out[j] = std::exp(in[j] - mx);
        for (double& v : out) v /= total;
      }
      break;
    }
    case Op::kConcatCols: {
      const std::size_t rows = val(0).rows();
      std::size_t cols = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        if (val(k).rows() != rows)
          throw ShapeError("concat_cols: row mismatch " + val(k).shape_string());
        cols += val(k).cols();
      }
      n.value.resize(rows, cols);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Matrix& p = val(k);
        for (std::size_t i = 0; i < rows; ++i)
          std::copy(p.row(i).begin(), p.row(i).end(), n.value.row(i).begin() + offset);
        offset += p.cols();
      }
      break;
    }
    case Op::kWeightedSum: {
      const Matrix& w = val(0);
      const std::size_t branches = n.parents.size() - 1;
      if (w.rows() != 1 || w.cols() != branches)
        throw ShapeError("weighted_sum: weights " + w.shape_string() + " for " +
                         std::to_string(branches) + " branches");
      const Matrix& first = val(1);
      n.value.resize(first.rows(), first.cols());
      n.value.fill(0.0);
      for (std::size_t k = 0; k < branches; ++k) {
        linalg::require_same_shape(first, val(k + 1), "weighted_sum");
        add_into(n.value, val(k + 1), w(0, k));
      }
      break;
    }
    case Op::kLayerNorm: {
      const Matrix& x = val(0);
      const Matrix& g = val(1);
      const Matrix& b = val(2);
      if (g.rows() != 1 || g.cols() != x.cols() || b.rows() != 1 || b.cols() != x.cols())
        throw ShapeError("layernorm: gain/bias must be 1x" + std::to_string(x.cols()));
      const std::size_t c = x.cols();
      n.value.resize(x.rows(), c);
      n.cache.resize(x.rows(), c);
      n.row_scale.resize(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row(i);
        double mu = 0.0;
        for (double v : in) mu += v;
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (double v : in) var += (v - mu) * (v - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        n.row_scale[i] = inv;
        auto xhat = n.cache.row(i);
        auto out = n.value.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          xhat[j] = (in[j] - mu) * inv;
          out[j] = xhat[j] * g(0, j) + b(0, j);
        }
      }
      break;
    }
    case Op::kGelu: {
      const Matrix& x = val(0);
      n.value.resize(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i) n.value.data()[i] = gelu_value(x.data()[i]);
      break;
    }
    case Op::kCrossEntropy: {
      const Matrix& z = val(0);
      if (n.labels.size() != z.rows())
        throw ShapeError("cross_entropy: " + std::to_string(n.labels.size()) + " labels for " +
                         z.shape_string() + " logits");
      n.cache.resize(z.rows(), z.cols());
      double total = 0.0;
      for (std::size_t i = 0; i < z.rows(); ++i) {
        const int label = n.labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= z.cols())
          throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
        auto in = z.row(i);
        auto p = n.cache.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double s = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) s += p[j] = std::exp(in[j] - mx);
        for (double& v : p) v /= s;
        const double log_z = mx + std::log(s);
        total += (1.0 - n.constant) * (log_z - in[static_cast<std::size_t>(label)]);
        if (n.constant > 0.0) {
          double mean_logit = 0.0;
          for (double v : in) mean_logit += v;
          mean_logit /= static_cast<double>(in.size());
          total += n.constant * (log_z - mean_logit);
        }
      }
      n.value.resize(1, 1);
      n.value(0, 0) = total / static_cast<double>(z.rows());
      break;
    }
    case Op::kPowScalar: {
      const Matrix& x = val(0);
      n.value.resize(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i)
        n.value.data()[i] = std::pow(x.data()[i], n.constant);
      break;
    }
    case Op::kMean: {
      const Matrix& x = val(0);
      double s = 0.0;
      for (double v : x.data()) s += v;
      n.value.resize(1, 1);
      n.value(0, 0) = s / static_cast<double>(x.size());
      break;
    }
    case Op::kScaleColumns: {
      const Matrix& x = val(0);
      const Matrix& r = val(1);
      if (r.rows() != 1 || r.cols() != x.cols())
        throw ShapeError("scale_columns: scale " + r.shape_string() + " for " + x.shape_string());
      n.value.resize(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row(i);
        auto out = n.value.row(i);
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] * r(0, j);
      }
      break;
    }
  }
}

void Tape::backward(NodeId output) {
  Node& out = nodes_.at(output.index);
  if (out.value.rows() != 1 || out.value.cols() != 1)
    throw ContractError("backward: output " + describe(output.index) + " is " +
                        out.value.shape_string() + ", expected 1x1");
  for (Node& n : nodes_) {
    if (!n.needs_grad) continue;
    n.grad.resize(n.value.rows(), n.value.cols());
    n.grad.fill(0.0);
  }
  if (!out.needs_grad) {
    zero_frozen_grads();
    return;
  }
  out.grad(0, 0) = 1.0;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.needs_grad && !n.parents.empty()) propagate(n);
  }
  zero_frozen_grads();
}

void Tape::zero_frozen_grads() {
  for (Node& n : nodes_) {
    if (n.op != Op::kParameter || n.trainable) continue;
    n.grad.resize(n.value.rows(), n.value.cols());
    n.grad.fill(0.0);
  }
}

void Tape::propagate(Node& n) {
  auto parent = [&](std::size_t k) -> Node& { return nodes_[n.parents[k].index]; };
  const Matrix& dy = n.grad;
  switch (n.op) {
    case Op::kInput:
    case Op::kParameter:
      break;
    case Op::kMatMul: {
      Node& a = parent(0);
      Node& b = parent(1);
      if (n.transpose_a) {  // y = a^T b
        if (a.needs_grad) matmul_nt_acc(a.grad, b.value, dy);
        if (b.needs_grad) matmul_acc(b.grad, a.value, dy);
      } else if (n.transpose_b) {  // y = a b^T
        if (a.needs_grad) matmul_acc(a.grad, dy, b.value);
        if (b.needs_grad) matmul_tn_acc(b.grad, dy, a.value);
      } else {
        if (a.needs_grad) matmul_nt_acc(a.grad, dy, b.value);
        if (b.needs_grad) matmul_tn_acc(b.grad, a.value, dy);
      }
      break;
    }
    case Op::kAdd: {
      Node& a = parent(0);
      Node& b = parent(1);
      if (a.needs_grad) add_into(a.grad, dy);
      if (b.needs_grad) {
        if (b.value.rows() == dy.rows()) {
          add_into(b.grad, dy);
        } else {
          for (std::size_t i = 0; i < dy.rows(); ++i)
            for (std::size_t j = 0; j < dy.cols(); ++j) b.grad(0, j) += dy(i, j);
        }
      }
      break;
    }
    case Op::kScale: {
      Node& a = parent(0);
      if (a.needs_grad) add_into(a.grad, dy, n.constant);
      break;
    }
    case Op::kSoftmaxRows: {
      Node& a = parent(0);
      if (!a.needs_grad) break;
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto y = n.value.row(i);
        auto g = dy.row(i);
        double inner = 0.0;
        for (std::size_t j = 0; j < y.size(); ++j) inner += g[j] * y[j];
        auto da = a.grad.row(i);
        for (std::size_t j = 0; j < y.size(); ++j) da[j] += y[j] * (g[j] - inner);
      }
      break;
    }
    case Op::kConcatCols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        Node& p = parent(k);
        const std::size_t cols = p.value.cols();
        if (p.needs_grad) {
          for (std::size_t i = 0; i < dy.rows(); ++i) {
            auto src = dy.row(i);
            auto dst = p.grad.row(i);
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[offset + j];
          }
        }
        offset += cols;
      }
      break;
    }
    case Op::kWeightedSum: {
      Node& w = parent(0);
      for (std::size_t k = 1; k < n.parents.size(); ++k) {
        Node& branch = parent(k);
        const double wk = w.value(0, k - 1);
        if (branch.needs_grad) add_into(branch.grad, dy, wk);
        if (w.needs_grad) {
          double inner = 0.0;
          for (std::size_t i = 0; i < dy.size(); ++i) inner += dy.data()[i] * branch.value.data()[i];
          w.grad(0, k - 1) += inner;
        }
      }
      break;
    }
    case Op::kLayerNorm: {
      Node& x = parent(0);
      Node& g = parent(1);
      Node& b = parent(2);
      const std::size_t c = dy.cols();
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto gy = dy.row(i);
        auto xhat = n.cache.row(i);
        if (g.needs_grad)
          for (std::size_t j = 0; j < c; ++j) g.grad(0, j) += gy[j] * xhat[j];
        if (b.needs_grad)
          for (std::size_t j = 0; j < c; ++j) b.grad(0, j) += gy[j];
        if (x.needs_grad) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = gy[j] * g.value(0, j);
            sum_d += d;
            sum_dx += d * xhat[j];
          }
          const double inv = n.row_scale[i];
          const double cn = static_cast<double>(c);
          auto dx = x.grad.row(i);
          for (std::size_t j = 0; j < c; ++j) {
            const double d = gy[j] * g.value(0, j);
            dx[j] += inv / cn * (cn * d - sum_d - xhat[j] * sum_dx);
          }
        }
      }
      break;
    }
    case Op::kGelu: {
      Node& x = parent(0);
      if (!x.needs_grad) break;
      for (std::size_t i = 0; i < dy.size(); ++i)
        x.grad.data()[i] += dy.data()[i] * gelu_slope(x.value.data()[i]);
      break;
    }
    case Op::kCrossEntropy: {
      Node& z = parent(0);
      if (!z.needs_grad) break;
      const double g = dy(0, 0) / static_cast<double>(z.value.rows());
      for (std::size_t i = 0; i < z.value.rows(); ++i) {
        auto p = n.cache.row(i);
        auto dz = z.grad.row(i);
        const double spread = n.constant / static_cast<double>(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) dz[j] += g * (p[j] - spread);
        dz[static_cast<std::size_t>(n.labels[i])] -= g * (1.0 - n.constant);
      }
      break;
    }
    case Op::kPowScalar: {
      Node& x = parent(0);
      if (!x.needs_grad) break;
      for (std::size_t i = 0; i < dy.size(); ++i)
        x.grad.data()[i] +=
            dy.data()[i] * n.constant * std::pow(x.value.data()[i], n.constant - 1.0);
      break;
    }
    case Op::kMean: {
      Node& x = parent(0);
      if (!x.needs_grad) break;
      const double g = dy(0, 0) / static_cast<double>(x.value.size());
      for (double& v : x.grad.data()) v += g;
      break;
    }
    case Op::kScaleColumns: {
      Node& x = parent(0);
      Node& r = parent(1);
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto g = dy.row(i);
        if (x.needs_grad) {
          auto dx = x.grad.row(i);
          for (std::size_t j = 0; j < g.size(); ++j) dx[j] += g[j] * r.value(0, j);
        }
        if (r.needs_grad) {
          auto xv = x.value.row(i);
          for (std::size_t j = 0; j < g.size(); ++j) r.grad(0, j) += g[j] * xv[j];
        }
      }
      break;
    }
  }
}

double grad_check(Tape& tape, NodeId output, NodeId param, double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw ContractError("grad_check: step outside [1e-7, 1e-3]");
  tape.forward(output);
  tape.backward(output);
  const Matrix analytic = tape.grad(param);
  Matrix& value = tape.leaf_value(param);
  std::vector<double> numeric(value.size());
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double saved = value.data()[i];
    value.data()[i] = saved + step;
    const double up = tape.forward(output)(0, 0);
    value.data()[i] = saved - step;
    const double down = tape.forward(output)(0, 0);
    value.data()[i] = saved;
    numeric[i] = (up - down) / (2.0 * step);
  }
  tape.forward(output);
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  // Entries far below the largest one are compared against a thousandth of
  // it, where central differences stop resolving them.
  const double floor = std::max(1e-3 * scale, 1e-10);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double rel = std::abs(analytic.data()[i] - numeric[i]) / std::max(std::abs(numeric[i]), floor);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace comcat::autodiff
