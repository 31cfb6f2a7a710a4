#pragma once
// Adam with the conventional moment hyperparameters.  Owns nothing: params
// are autodiff leaves whose grads are filled by backward() before step().

#include <cmath>
#include <vector>

#include "patchsmith/autodiff.hpp"

namespace patchsmith {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ad::Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value().shape(), 0.0);
      v_.emplace_back(p.value().shape(), 0.0);
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update from the gradients currently on the params; clears them.
  void step() {
    ++t_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;  // untouched this step: no update
      const Tensor& g = p.grad();
      Tensor& val = p.mutable_value();
      for (std::int64_t i = 0; i < val.numel(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        double mhat = m_[k][i] / c1;
        double vhat = v_[k][i] / c2;
        val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    zero_grad();
  }

 private:
  std::vector<ad::Var> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace patchsmith
