#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "linalg/matrix.hpp"
#include "linalg/svd.hpp"

namespace comcat::vit {

using linalg::FactorPair;
using linalg::Matrix;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t blocks = 4;
  std::size_t ffn_dim = 128;
  std::size_t classes = 10;
  std::size_t image_side = 16;
  std::size_t patch_side = 4;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t patches() const { return (image_side / patch_side) * (image_side / patch_side); }
  // Patch tokens plus the class token.
  std::size_t seq_len() const { return patches() + 1; }
  std::size_t patch_pixels() const { return patch_side * patch_side; }
  // Columns of the patch matrix: one class-token indicator plus the pixels.
  std::size_t patch_features() const { return patch_pixels() + 1; }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormWeights {
  Matrix gain;  // 1 x d_model
  Matrix bias;  // 1 x d_model
};

// Projections of one head: wq, wk, wv are d_model x d; wo is d x d_model.
// The full output projection is the row-wise concatenation of every wo.
struct HeadWeights {
  Matrix wq, wk, wv, wo;
};

struct MhaWeights {
  std::vector<HeadWeights> heads;
};

// Factors of one head's combined matrices:
//   wq * wk^T ~= uq * sk^T   (uq, sk: d_model x r1)
//   wv * wo   ~= uv * so     (uv: d_model x r2, so: r2 x d_model)
struct LowRankHead {
  Matrix uq, sk, uv, so;
  std::size_t qk_rank() const { return uq.cols(); }
  std::size_t vo_rank() const { return uv.cols(); }
};

struct LowRankMhaWeights {
  std::vector<LowRankHead> heads;
};

enum class MhaForm : std::uint8_t { kStandard, kCombined, kLowRank };

const char* form_name(MhaForm form);
MhaForm parse_form(const std::string& name);

// A dense matrix or its rank-r factorization.
using LinearWeight = std::variant<Matrix, FactorPair>;

struct FfnWeights {
  LinearWeight w1;  // d_model x ffn_dim
  Matrix b1;        // 1 x ffn_dim
  LinearWeight w2;  // ffn_dim x d_model
  Matrix b2;        // 1 x d_model
};

struct Block {
  LayerNormWeights ln1;
  MhaForm form = MhaForm::kStandard;
  MhaWeights mha;               // standard / combined forms
  LowRankMhaWeights low_rank;   // low-rank form
  LayerNormWeights ln2;
  FfnWeights ffn;
};

// Pre-norm ViT. Row 0 of `embed` is the class token and the remaining rows
// project patch pixels, so patch_matrix(image) * embed yields the token
// embeddings directly.
struct VitModel {
  ModelConfig config;
  Matrix embed;  // patch_features x d_model
  Matrix pos;    // seq_len x d_model
  std::vector<Block> blocks;
  LayerNormWeights final_ln;
  Matrix head_w;  // d_model x classes
  Matrix head_b;  // 1 x classes
};

VitModel init_model(const ModelConfig& config, std::uint64_t seed);

// Visits every stored tensor under its canonical name, in a fixed order.
void visit_tensors(VitModel& model, const std::function<void(const std::string&, Matrix&)>& fn);
void visit_tensors(const VitModel& model,
                   const std::function<void(const std::string&, const Matrix&)>& fn);
std::size_t parameter_count(const VitModel& model);

Matrix linear_product(const LinearWeight& w);
std::size_t linear_parameter_count(const LinearWeight& w);
// x * w, evaluated as (x * u) * s for a factor pair.
Matrix apply_linear(const Matrix& x, const LinearWeight& w);

Matrix softmax_rows(const Matrix& m);
Matrix layer_norm(const Matrix& x, const LayerNormWeights& ln);
Matrix gelu(const Matrix& x);

// Concat(head_1..head_h) * W^O with head_i = Softmax(Q_i K_i^T / sqrt(d)) V_i.
Matrix mha_standard(const Matrix& xq, const Matrix& xk, const Matrix& xv, const MhaWeights& w);
// sum_i Softmax(xq (wq_i wk_i^T) xk^T / sqrt(d)) xv (wv_i wo_i).
Matrix mha_combined(const Matrix& xq, const Matrix& xk, const Matrix& xv, const MhaWeights& w);
// sum_i Softmax((xq uq_i)(xk sk_i)^T / sqrt(head_dim)) (xv uv_i) so_i. The
// scale keeps the original head dimension regardless of the ranks.
Matrix mha_lowrank(const Matrix& xq, const Matrix& xk, const Matrix& xv,
                   const LowRankMhaWeights& w, std::size_t head_dim);

Matrix ffn_forward(const Matrix& x, const FfnWeights& f);

// n x patch_features matrix: row 0 is the class-token indicator, row t > 0
// holds the pixels of patch t - 1 (row-major patch order).
Matrix patch_matrix(const ModelConfig& config, const Matrix& image);

// Logits for one image (1 x classes).
Matrix forward_one(const VitModel& model, const Matrix& image);
// batch x classes.
Matrix model_forward(const VitModel& model, std::span<const Matrix> images);

void set_form(VitModel& model, MhaForm form);

}  // namespace comcat::vit
