#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "beal/nn.hpp"
#include "beal/tensor.hpp"

namespace beal::optim {

// Adaptive-moment optimizer for the segmentation network.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<nn::Param<T>*> params, T beta1 = T(0.9),
                T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step(T lr) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k]->value;
      const auto& g = params_[k]->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::int64_t step_count() const { return t_; }

  // Optimizer state as named tensors for checkpointing.
  std::vector<std::pair<std::string, Tensor<T>*>> state_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      out.emplace_back(params_[k]->name + ".adam_m", &m_[k]);
      out.emplace_back(params_[k]->name + ".adam_v", &v_[k]);
    }
    return out;
  }

  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  std::vector<nn::Param<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  T beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Plain stochastic gradient descent, used for the discriminators.
template <typename T>
class Sgd {
 public:
  explicit Sgd(std::vector<nn::Param<T>*> params) : params_(std::move(params)) {}

  void step(T lr) {
    for (auto* p : params_)
      for (std::int64_t i = 0; i < p->value.numel(); ++i)
        p->value[i] -= lr * p->grad[i];
  }

 private:
  std::vector<nn::Param<T>*> params_;
};

}  // namespace beal::optim
