#include <cmath>

#include "fct/train.hpp"

namespace fct {

double Schedule::lr_at(int64_t step) const {
  const auto milestone_step = static_cast<int64_t>(std::llround(milestone * static_cast<double>(steps)));
  return step >= milestone_step ? 0.1 * lr : lr;
}

void AdamW::step(ParamStore& params, double lr, double weight_decay) {
  if (!(lr > 0.0)) throw TrainingError("learning rate must be positive");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params.items()) {
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != data.size()) {
      m.assign(data.size(), 0.0);
      v.assign(data.size(), 0.0);
    }
    const double decay = 1.0 - lr * weight_decay;
    for (size_t i = 0; i < data.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      data[i] = data[i] * decay - lr * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : params.items()) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : params.items()) {
      for (double& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace fct
