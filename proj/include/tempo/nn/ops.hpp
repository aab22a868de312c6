#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tempo/nn/autograd.hpp"

namespace tempo::nn {

// 3-D cross-correlation with zero "same" padding.
// x: (N, Cin, T, H, W); weight: (Cout, Cin, kt, kh, kw) with odd kernel dims;
// bias: (Cout). Output: (N, Cout, T, H, W).
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Affine map over the last axis. weight: (Dout, Din); bias: (Dout).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> sum(const Var<T>& x);

// sum(x * weights) for a constant weight tensor; projects any output to a
// scalar for gradient checks.
template <typename T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& weights);

// Mean over the listed axes (dropped from the result). Accumulates in a wider
// type, so reductions over permuted inputs agree bit-for-bit in practice.
template <typename T>
Var<T> mean_axes(const Var<T>& x, std::vector<int> axes);

// (N, C, T, H, W) -> (N, C, H, W)
template <typename T>
Var<T> mean_over_time(const Var<T>& x);

// (N, C, ...) -> (N, C)
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

// Adaptive average pooling of the last two axes to (out_h, out_w). Output cell
// i covers input rows [floor(i*H/out_h), ceil((i+1)*H/out_h)).
template <typename T>
Var<T> adaptive_avg_pool2d(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

// Channel j of the output is the mean of input channels [j*C/c, (j+1)*C/c)
// along `axis`.
template <typename T>
Var<T> channel_group_mean(const Var<T>& x, int axis, std::int64_t groups);

// Mean softmax cross-entropy over rows of logits (N, K).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int64_t> labels);

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

// Per-channel normalization of (N, C, T, H, W). Train mode uses batch
// statistics (biased variance) and updates the running estimates with the
// unbiased variance; eval mode uses the running estimates.
template <typename T>
Var<T> batchnorm3d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormState<T>& state, bool train);

// Row-wise softmax of (N, K); not differentiable, used at evaluation.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace tempo::nn
