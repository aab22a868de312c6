#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "tempo/nn/autograd.hpp"

namespace tempo::nn {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double lr_coeff = 1e-2;  // eta; peak lr is eta * batch_size / 64
  std::int64_t batch_size = 64;
  std::int64_t total_steps = 1;

  double max_lr() const { return lr_coeff * static_cast<double>(batch_size) / 64.0; }
  void validate() const;
};

// Cosine annealing from max_lr at step 0 to 0 at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double max_lr);

// AdamW with decoupled weight decay: the decay term lr * weight_decay * value
// is applied to the value directly, then the bias-corrected Adam update.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, OptimizerConfig cfg);

  // Applies one update with learning rate `lr`; advances the step counter.
  void step(double lr);

  std::int64_t steps_taken() const { return steps_; }
  void set_steps_taken(std::int64_t steps) { steps_ = steps; }
  const OptimizerConfig& config() const { return cfg_; }

  // First/second moment buffers, parallel to the parameter list.
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  OptimizerConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t steps_ = 0;
};

}  // namespace tempo::nn
