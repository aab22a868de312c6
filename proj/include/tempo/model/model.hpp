#pragma once

// SFU compression -> aggregator (stack of residual 3-D conv blocks, or a mean
// over time) -> pooled two-layer MLP head.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/nn/autograd.hpp"
#include "tempo/nn/ops.hpp"

namespace tempo::model {

struct SFUConfig {
  std::optional<std::int64_t> spatial;   // output grid s x s
  std::optional<std::int64_t> channels;  // output channel count c
};

struct TMMConfig {
  std::int64_t n_blocks = 1;
  std::int64_t hidden = 256;
  std::int64_t io = 64;
};

struct HeadConfig {
  std::int64_t hidden = 1024;
  std::int64_t n_classes = 4;
};

enum class Aggregator { Tmm, AveragePooling };

std::string aggregator_name(Aggregator a);
Aggregator parse_aggregator(const std::string& name);

struct ModelConfig {
  // Frozen feature geometry the model is built for.
  std::int64_t in_channels = 64;
  std::int64_t grid_h = 8;
  std::int64_t grid_w = 8;

  SFUConfig sfu;
  TMMConfig tmm;
  HeadConfig head;
  Aggregator aggregator = Aggregator::Tmm;

  std::int64_t out_channels() const { return sfu.channels.value_or(in_channels); }
  std::int64_t out_h() const { return sfu.spatial.value_or(grid_h); }
  std::int64_t out_w() const { return sfu.spatial.value_or(grid_w); }

  // Throws ConfigError naming the inconsistent stage.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// SFU ops on (..., C, Hf, Wf) style tensors; `channel_axis` selects C.
template <typename T>
nn::Var<T> sfu_spatial_compress(const nn::Var<T>& x, std::int64_t s);
template <typename T>
nn::Var<T> sfu_channel_compress(const nn::Var<T>& x, int channel_axis, std::int64_t c);

// (N, C, T, H, W) -> (N, C, H, W)
template <typename T>
nn::Var<T> average_pool_aggregator(const nn::Var<T>& x);

template <typename T>
struct R3DBlock {
  nn::Parameter<T> conv1, bn1_gamma, bn1_beta;
  nn::Parameter<T> conv2, bn2_gamma, bn2_beta;
  nn::Parameter<T> conv3, bn3_gamma, bn3_beta;
  nn::BatchNormState<T> bn1, bn2, bn3;
  nn::Var<T> zero_h, zero_c;  // conv bias placeholders; BN follows every conv

  R3DBlock(const std::string& prefix, std::int64_t channels, std::int64_t hidden,
           std::uint64_t seed);

  // y = relu(x + bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x)))))))))
  nn::Var<T> forward(const nn::Var<T>& x, bool train);

  std::vector<nn::Parameter<T>*> parameters();
};

template <typename T>
struct MLPHead {
  nn::Parameter<T> fc1_w, fc1_b, fc2_w, fc2_b;

  MLPHead(const std::string& prefix, std::int64_t in, std::int64_t hidden, std::int64_t classes,
          std::uint64_t seed);

  // Global average over every axis after the channel axis, then the MLP.
  nn::Var<T> forward(const nn::Var<T>& x);

  std::vector<nn::Parameter<T>*> parameters();
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // features: (N, C, T, Hf, Wf) frozen features. Returns logits (N, K).
  nn::Var<T> forward(const nn::Var<T>& features, bool train);

  // Skips SFU: input is already compressed (and possibly cropped) features.
  nn::Var<T> forward_compressed(const nn::Var<T>& compressed, bool train);

  nn::Var<T> compress(const nn::Var<T>& features) const;

  std::vector<nn::Parameter<T>*> parameters();  // TMM then head
  std::vector<nn::Parameter<T>*> tmm_parameters();
  std::vector<nn::Parameter<T>*> head_parameters();
  std::vector<std::pair<std::string, nn::BatchNormState<T>*>> batchnorm_states();
  std::int64_t trainable_count();

  std::vector<std::unique_ptr<R3DBlock<T>>>& blocks() { return blocks_; }
  MLPHead<T>& head() { return *head_; }

 private:
  ModelConfig cfg_;
  std::vector<std::unique_ptr<R3DBlock<T>>> blocks_;
  std::unique_ptr<MLPHead<T>> head_;
};

// Named fp32 tensors (parameters, BN statistics, optimizer moments).
using TensorBundle = std::map<std::string, Tensor<float>>;

// Parameters and BN running statistics, keyed by name ("<bn>.running_mean").
template <typename T>
TensorBundle state_dict(Model<T>& model);

// Copies every entry whose name starts with `prefix` into the model. Missing
// or mis-shaped tensors raise ConfigError. Returns the number of tensors loaded.
template <typename T>
std::size_t load_state_dict(Model<T>& model, const TensorBundle& state, const std::string& prefix = "");

}  // namespace tempo::model
