#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "autodiff/tape.hpp"
#include "vit/model.hpp"

namespace comcat::vit {

using autodiff::NodeId;
using autodiff::Tape;

// Identifies one factorized weight: a head's QK or VO product, or one of the
// two FFN matrices of a block.
struct SiteKey {
  enum class Kind : std::uint8_t { kQK, kVO, kFfn1, kFfn2 };
  std::size_t block = 0;
  std::size_t head = 0;  // unused for FFN sites
  Kind kind = Kind::kQK;

  std::string id() const;
  friend auto operator<=>(const SiteKey&, const SiteKey&) = default;
};

struct GraphHooks {
  // Optional 1 x rank column mask applied after the input projection of a
  // factorized site (x * u), used for probability-weighted rank mixtures.
  std::function<std::optional<NodeId>(Tape&, const SiteKey&)> site_mask;
  // Replaces the attention sub-graph of a block; receives the normalized input.
  std::function<std::optional<NodeId>(Tape&, std::size_t block, NodeId normed)> attention;
};

struct GraphOptions {
  // Model tensors become trainable parameters; otherwise constant inputs.
  bool model_trainable = true;
  double label_smoothing = 0.0;
  GraphHooks hooks;
};

// A tape for one image built from a model's current weights. Model tensors
// are registered under their canonical names (see visit_tensors).
class ModelGraph {
 public:
  ModelGraph(const VitModel& model, GraphOptions options = {});

  Tape& tape() { return tape_; }
  NodeId logits() const { return logits_; }
  NodeId cross_entropy() const { return ce_; }
  NodeId patches() const { return patches_; }
  // Tape node holding each model tensor.
  const std::map<std::string, NodeId>& tensor_nodes() const { return tensors_; }

  void bind(const Matrix& image, int label);
  // Copies the model's current tensor values into the tape.
  void load_weights(const VitModel& model);

 private:
  NodeId tensor(const std::string& name, const Matrix& value);
  NodeId linear(const std::string& name, const LinearWeight& w, NodeId x,
                const std::optional<SiteKey>& site);

  ModelConfig config_;
  GraphOptions options_;
  Tape tape_;
  NodeId patches_;
  NodeId logits_;
  NodeId ce_;
  std::map<std::string, NodeId> tensors_;
};

}  // namespace comcat::vit
