#pragma once

// Adam with bias correction over a fixed, ordered parameter list.

#include "stn/nn.hpp"

namespace stn {

template <class S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void attach(std::vector<std::pair<std::string, Param<S>*>> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (auto& [name, p] : params_) {
      m_.push_back(Tensor<S>(p->value.shape()));
      v_.push_back(Tensor<S>(p->value.shape()));
    }
    t_ = 0;
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long step_count() const { return t_; }

  void zero_grad() {
    for (auto& [name, p] : params_)
      if (!p->grad.empty()) p->grad.zero();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, (double)t_);
    double bc2 = 1.0 - std::pow(b2_, (double)t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      Param<S>& p = *params_[k].second;
      if (p.grad.empty()) continue;
      Tensor<S>& m = m_[k];
      Tensor<S>& v = v_[k];
      for (long i = 0; i < p.value.numel(); ++i) {
        double gi = (double)p.grad[i];
        double mi = b1_ * (double)m[i] + (1.0 - b1_) * gi;
        double vi = b2_ * (double)v[i] + (1.0 - b2_) * gi * gi;
        m[i] = (S)mi;
        v[i] = (S)vi;
        p.value[i] -= (S)(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
      }
    }
  }

  // Serialization hooks; slot order follows the attached parameter list.
  size_t slots() const { return params_.size(); }
  Tensor<S>& moment1(size_t k) { return m_[k]; }
  Tensor<S>& moment2(size_t k) { return v_[k]; }
  void set_step_count(long t) { t_ = t; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::pair<std::string, Param<S>*>> params_;
  std::vector<Tensor<S>> m_, v_;
};

}  // namespace stn
