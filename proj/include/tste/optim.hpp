#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "tste/autograd.hpp"
#include "tste/tensor.hpp"

namespace tste::optim {

/// Adam. Per-parameter state keyed by identity; updates are elementwise, so
/// map iteration order never affects values.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const GradMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& entry : grads.entries()) {
      Parameter* p = entry.param;
      if (!p->trainable) continue;
      auto& st = state_[p];
      if (st.m.empty()) {
        st.m = Tensor(p->value.dims());
        st.v = Tensor(p->value.dims());
      }
      for (int64_t i = 0; i < p->value.size(); ++i) {
        const double g = entry.grad[i];
        st.m[i] = static_cast<float>(beta1_ * st.m[i] + (1.0 - beta1_) * g);
        st.v[i] = static_cast<float>(beta2_ * st.v[i] + (1.0 - beta2_) * g * g);
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p->value[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  double lr() const { return lr_; }

 private:
  struct State {
    Tensor m;
    Tensor v;
  };
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::unordered_map<const Parameter*, State> state_;
};

/// Keeps only the entries whose parameter is in `owned`.
inline GradMap filter_grads(const GradMap& grads, const std::vector<Parameter*>& owned) {
  GradMap out;
  for (const auto& e : grads.entries())
    for (Parameter* p : owned)
      if (e.param == p) {
        out.add(e.param, e.grad);
        break;
      }
  return out;
}

}  // namespace tste::optim
