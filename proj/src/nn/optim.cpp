#include "tempo/nn/optim.hpp"

#include <string>

namespace tempo::nn {

void OptimizerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0,1)");
  }
  if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double max_lr) {
  if (total_steps < 1 || step < 0 || step > total_steps) {
    throw ConfigError("cosine_lr step " + std::to_string(step) + " outside [0," +
                      std::to_string(total_steps) + "]");
  }
  if (step == 0) return max_lr;
  if (step == total_steps) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(total_steps);
  return max_lr * 0.5 * (1.0 + std::cos(phase));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (auto* p : params_) {
    m_.push_back(Tensor<T>::zeros(p->value().shape()));
    v_.push_back(Tensor<T>::zeros(p->value().shape()));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<T>& p = *params_[k];
    if (!p.trainable()) continue;
    T* value = p.value().raw();
    const T* grad = p.grad().raw();
    T* m = m_[k].raw();
    T* v = v_[k].raw();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double g = grad[i];
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double x = static_cast<double>(value[i]) * decay;
      x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      value[i] = static_cast<T>(x);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace tempo::nn
