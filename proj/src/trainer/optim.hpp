#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "linalg/matrix.hpp"

namespace comcat::trainer {

using linalg::Matrix;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled weight decay, applied to multi-row tensors only.
  double weight_decay = 0.0;
};

// Adam over a fixed list of tensors, with bias correction.
class Adam {
 public:
  Adam(std::vector<Matrix*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (Matrix* p : params_) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }

  void step(const std::vector<Matrix>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k]->data();
      auto g = grads[k].data();
      auto m = m_[k].data();
      auto v = v_[k].data();
      const bool decay = config_.weight_decay > 0.0 && params_[k]->rows() > 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        if (decay) p[i] -= lr * config_.weight_decay * p[i];
        p[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  const std::vector<Matrix*>& params() const { return params_; }

 private:
  std::vector<Matrix*> params_;
  AdamConfig config_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

// Cosine decay from lr to lr_min over total steps.
inline double cosine_lr(double lr, double lr_min, std::size_t step, std::size_t total) {
  if (total <= 1) return lr;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace comcat::trainer
