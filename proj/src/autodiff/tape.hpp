#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "linalg/matrix.hpp"

namespace comcat::autodiff {

using linalg::Matrix;

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op : std::uint8_t {
  kInput,
  kParameter,
  kMatMul,
  kAdd,
  kScale,
  kSoftmaxRows,
  kConcatCols,
  kWeightedSum,
  kLayerNorm,
  kGelu,
  kCrossEntropy,
  kPowScalar,
  kMean,
  kScaleColumns,
};

const char* op_name(Op op);

inline constexpr double kLayerNormEps = 1e-5;

// Reverse-mode tape over matrix values. Nodes are evaluated eagerly when
// recorded; forward() re-evaluates the whole list in recording order after
// leaves are rebound, so one tape can be reused across samples.
class Tape {
 public:
  NodeId input(Matrix value, std::string name = {});
  NodeId parameter(const std::string& name, Matrix value);

  // op(a) * op(b); at most one operand may be transposed.
  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
  // a + b, where b has a's shape or is a 1 x cols row added to every row.
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId softmax_rows(NodeId a);
  NodeId concat_cols(std::span<const NodeId> parts);
  // sum_k weights[k] * branches[k]; weights is 1 x K.
  NodeId weighted_sum(NodeId weights, std::span<const NodeId> branches);
  NodeId layernorm(NodeId x, NodeId gain, NodeId bias);
  NodeId gelu(NodeId x);
  // Mean over rows of -log softmax(row)[label].
  // smoothing mixes the one-hot target with the uniform distribution.
  NodeId cross_entropy(NodeId logits, std::vector<int> labels, double smoothing = 0.0);
  // Elementwise x^exponent over positive entries.
  NodeId pow_scalar(NodeId x, double exponent);
  // 1 x 1 mean of all entries.
  NodeId mean(NodeId x);
  // x with column j multiplied by row(0, j).
  NodeId scale_columns(NodeId x, NodeId row);

  // Rebinds a leaf; the shape must not change.
  void set_value(NodeId leaf, const Matrix& value);
  Matrix& leaf_value(NodeId leaf);
  void set_labels(NodeId cross_entropy_node, std::span<const int> labels);
  // Frozen parameters receive zero adjoints.
  void set_trainable(NodeId parameter, bool trainable);

  const Matrix& value(NodeId id) const { return nodes_[id.index].value; }
  const Matrix& grad(NodeId id) const { return nodes_[id.index].grad; }
  Op op(NodeId id) const { return nodes_[id.index].op; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& forward(NodeId output);
  // Populates adjoints of every node that depends on a trainable parameter.
  // output must be 1 x 1.
  void backward(NodeId output);

  std::optional<NodeId> find_parameter(const std::string& name) const;
  const std::map<std::string, NodeId>& parameters() const { return params_; }

 private:
  struct Node {
    Op op = Op::kInput;
    std::vector<NodeId> parents;
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool trainable = true;
    bool transpose_a = false;
    bool transpose_b = false;
    double constant = 0.0;
    std::vector<int> labels;
    Matrix cache;
    std::vector<double> row_scale;
    std::string name;
  };

  NodeId push(Node node);
  void evaluate(Node& node);
  void propagate(Node& node);
  std::string describe(std::size_t index) const;
  void zero_frozen_grads();

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> params_;
};

// Max over entries of |analytic - numeric| / max(|numeric|, 1e-3 * max|numeric|, 1e-10)
// for d(output)/d(param), numeric being the central difference. Leaves the tape evaluated at the original values.
double grad_check(Tape& tape, NodeId output, NodeId param, double step);

}  // namespace comcat::autodiff
