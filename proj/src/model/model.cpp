#include "tempo/model/model.hpp"

#include <cmath>

#include "tempo/core/error.hpp"
#include "tempo/core/rng.hpp"

namespace tempo::model {

using nn::Parameter;
using nn::Var;

namespace {

// Kaiming-normal for conv weights (fan_in = Cin * kernel volume).
template <typename T>
Tensor<T> conv_init(const std::string& name, Shape shape, std::uint64_t seed) {
  const std::int64_t fan_in = shape[1] * shape[2] * shape[3] * shape[4];
  Rng rng(seed, "init/" + name);
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear weights and biases.
template <typename T>
Tensor<T> linear_init(const std::string& name, Shape shape, std::int64_t fan_in, std::uint64_t seed) {
  Rng rng(seed, "init/" + name);
  Tensor<T> t(std::move(shape));
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-b, b));
  return t;
}

template <typename T>
Parameter<T> ones(const std::string& name, std::int64_t n) {
  return Parameter<T>(name, Tensor<T>(Shape{n}, T(1)));
}

template <typename T>
Parameter<T> zeros(const std::string& name, std::int64_t n) {
  return Parameter<T>(name, Tensor<T>(Shape{n}, T(0)));
}

std::string opt_str(const std::optional<std::int64_t>& v) {
  return v ? std::to_string(*v) : std::string("none");
}

}  // namespace

std::string aggregator_name(Aggregator a) {
  return a == Aggregator::Tmm ? "tmm" : "average_pooling";
}

Aggregator parse_aggregator(const std::string& name) {
  if (name == "tmm") return Aggregator::Tmm;
  if (name == "average_pooling" || name == "avgpool") return Aggregator::AveragePooling;
  throw ConfigError("unknown aggregator '" + name + "' (expected tmm or average_pooling)");
}

void ModelConfig::validate() const {
  if (in_channels < 1 || grid_h < 1 || grid_w < 1) {
    throw ConfigError("input stage: feature geometry must be positive, got C=" +
                      std::to_string(in_channels) + " grid " + std::to_string(grid_h) + "x" +
                      std::to_string(grid_w));
  }
  if (sfu.spatial && (*sfu.spatial < 1 || *sfu.spatial > grid_h || *sfu.spatial > grid_w)) {
    throw ConfigError("sfu stage: spatial target " + opt_str(sfu.spatial) + " must be in [1, " +
                      std::to_string(std::min(grid_h, grid_w)) + "]");
  }
  if (sfu.channels && (*sfu.channels < 1 || in_channels % *sfu.channels != 0)) {
    throw ConfigError("sfu stage: channel target " + opt_str(sfu.channels) + " must divide C=" +
                      std::to_string(in_channels));
  }
  if (aggregator == Aggregator::Tmm) {
    if (tmm.n_blocks < 0) throw ConfigError("tmm stage: n_blocks must be >= 0");
    if (tmm.n_blocks > 0 && tmm.hidden < 1) throw ConfigError("tmm stage: hidden channels must be positive");
    if (tmm.io != out_channels()) {
      throw ConfigError("tmm stage: io_channels " + std::to_string(tmm.io) +
                        " does not match SFU output channels " + std::to_string(out_channels()));
    }
  }
  if (head.hidden < 1) throw ConfigError("head stage: hidden dim must be positive");
  if (head.n_classes < 2) throw ConfigError("head stage: n_classes must be >= 2");
}

nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json sfu = nlohmann::json::object();
  sfu["spatial"] = cfg.sfu.spatial ? nlohmann::json(*cfg.sfu.spatial) : nlohmann::json(nullptr);
  sfu["channels"] = cfg.sfu.channels ? nlohmann::json(*cfg.sfu.channels) : nlohmann::json(nullptr);
  return {{"in_channels", cfg.in_channels},
          {"grid_h", cfg.grid_h},
          {"grid_w", cfg.grid_w},
          {"sfu", sfu},
          {"tmm", {{"n_blocks", cfg.tmm.n_blocks}, {"hidden", cfg.tmm.hidden}, {"io", cfg.tmm.io}}},
          {"head", {{"hidden", cfg.head.hidden}, {"n_classes", cfg.head.n_classes}}},
          {"aggregator", aggregator_name(cfg.aggregator)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.in_channels = j.at("in_channels").get<std::int64_t>();
    c.grid_h = j.at("grid_h").get<std::int64_t>();
    c.grid_w = j.at("grid_w").get<std::int64_t>();
    const auto& s = j.at("sfu");
    if (!s.at("spatial").is_null()) c.sfu.spatial = s.at("spatial").get<std::int64_t>();
    if (!s.at("channels").is_null()) c.sfu.channels = s.at("channels").get<std::int64_t>();
    c.tmm.n_blocks = j.at("tmm").at("n_blocks").get<std::int64_t>();
    c.tmm.hidden = j.at("tmm").at("hidden").get<std::int64_t>();
    c.tmm.io = j.at("tmm").at("io").get<std::int64_t>();
    c.head.hidden = j.at("head").at("hidden").get<std::int64_t>();
    c.head.n_classes = j.at("head").at("n_classes").get<std::int64_t>();
    c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

template <typename T>
Var<T> sfu_spatial_compress(const Var<T>& x, std::int64_t s) {
  const auto& sh = x.shape();
  if (sh.size() < 2) throw ConfigError("spatial compression needs a grid, got " + shape_str(sh));
  const std::int64_t h = sh[sh.size() - 2], w = sh[sh.size() - 1];
  if (s < 1 || s > h || s > w) {
    throw ConfigError("spatial target " + std::to_string(s) + " exceeds feature grid " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  if (s == h && s == w) return x;
  return nn::adaptive_avg_pool2d(x, s, s);
}

template <typename T>
Var<T> sfu_channel_compress(const Var<T>& x, int channel_axis, std::int64_t c) {
  const std::int64_t C = x.shape().at(static_cast<std::size_t>(channel_axis));
  if (c < 1 || C % c != 0) {
    throw ConfigError("channel target " + std::to_string(c) + " does not divide C=" + std::to_string(C));
  }
  if (c == C) return x;
  return nn::channel_group_mean(x, channel_axis, c);
}

template <typename T>
Var<T> average_pool_aggregator(const Var<T>& x) {
  return nn::mean_over_time(x);
}

template <typename T>
R3DBlock<T>::R3DBlock(const std::string& p, std::int64_t c, std::int64_t h, std::uint64_t seed)
    : conv1(p + ".conv1.weight", conv_init<T>(p + ".conv1.weight", {h, c, 3, 1, 1}, seed)),
      bn1_gamma(ones<T>(p + ".bn1.gamma", h)),
      bn1_beta(zeros<T>(p + ".bn1.beta", h)),
      conv2(p + ".conv2.weight", conv_init<T>(p + ".conv2.weight", {h, h, 1, 3, 3}, seed)),
      bn2_gamma(ones<T>(p + ".bn2.gamma", h)),
      bn2_beta(zeros<T>(p + ".bn2.beta", h)),
      conv3(p + ".conv3.weight", conv_init<T>(p + ".conv3.weight", {c, h, 1, 1, 1}, seed)),
      bn3_gamma(ones<T>(p + ".bn3.gamma", c)),
      bn3_beta(zeros<T>(p + ".bn3.beta", c)),
      bn1(h),
      bn2(h),
      bn3(c),
      zero_h(Tensor<T>(Shape{h})),
      zero_c(Tensor<T>(Shape{c})) {}

template <typename T>
Var<T> R3DBlock<T>::forward(const Var<T>& x, bool train) {
  const std::int64_t c = conv1.value().dim(1);
  if (x.shape().size() != 5 || x.shape()[1] != c) {
    throw ConfigError("block expects (N," + std::to_string(c) + ",T,H,W), got " + shape_str(x.shape()));
  }
  auto y = nn::conv3d(x, conv1.var(), zero_h);
  y = nn::relu(nn::batchnorm3d(y, bn1_gamma.var(), bn1_beta.var(), bn1, train));
  y = nn::conv3d(y, conv2.var(), zero_h);
  y = nn::relu(nn::batchnorm3d(y, bn2_gamma.var(), bn2_beta.var(), bn2, train));
  y = nn::conv3d(y, conv3.var(), zero_c);
  y = nn::batchnorm3d(y, bn3_gamma.var(), bn3_beta.var(), bn3, train);
  return nn::relu(nn::add(x, y));
}

template <typename T>
std::vector<Parameter<T>*> R3DBlock<T>::parameters() {
  return {&conv1, &bn1_gamma, &bn1_beta, &conv2, &bn2_gamma, &bn2_beta, &conv3, &bn3_gamma, &bn3_beta};
}

template <typename T>
MLPHead<T>::MLPHead(const std::string& p, std::int64_t in, std::int64_t hidden, std::int64_t classes,
                    std::uint64_t seed)
    : fc1_w(p + ".fc1.weight", linear_init<T>(p + ".fc1.weight", {hidden, in}, in, seed)),
      fc1_b(p + ".fc1.bias", linear_init<T>(p + ".fc1.bias", {hidden}, in, seed)),
      fc2_w(p + ".fc2.weight", linear_init<T>(p + ".fc2.weight", {classes, hidden}, hidden, seed)),
      fc2_b(p + ".fc2.bias", linear_init<T>(p + ".fc2.bias", {classes}, hidden, seed)) {}

template <typename T>
Var<T> MLPHead<T>::forward(const Var<T>& x) {
  const std::int64_t in = fc1_w.value().dim(1);
  if (x.shape().size() < 2 || x.shape()[1] != in) {
    throw ConfigError("head expects " + std::to_string(in) + " channels, got " + shape_str(x.shape()));
  }
  auto pooled = x.shape().size() == 2 ? x : nn::global_avg_pool(x);
  auto h = nn::relu(nn::linear(pooled, fc1_w.var(), fc1_b.var()));
  return nn::linear(h, fc2_w.var(), fc2_b.var());
}

template <typename T>
std::vector<Parameter<T>*> MLPHead<T>::parameters() {
  return {&fc1_w, &fc1_b, &fc2_w, &fc2_b};
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.aggregator == Aggregator::Tmm) {
    for (std::int64_t b = 0; b < cfg_.tmm.n_blocks; ++b) {
      blocks_.push_back(std::make_unique<R3DBlock<T>>("tmm.block" + std::to_string(b), cfg_.tmm.io,
                                                      cfg_.tmm.hidden, seed));
    }
  }
  head_ = std::make_unique<MLPHead<T>>("head", cfg_.out_channels(), cfg_.head.hidden,
                                       cfg_.head.n_classes, seed);
}

template <typename T>
Var<T> Model<T>::compress(const Var<T>& features) const {
  const auto& s = features.shape();
  if (s.size() != 5 || s[1] != cfg_.in_channels || s[3] != cfg_.grid_h || s[4] != cfg_.grid_w) {
    throw ConfigError("input stage: model built for (N," + std::to_string(cfg_.in_channels) + ",T," +
                      std::to_string(cfg_.grid_h) + "," + std::to_string(cfg_.grid_w) +
                      ") features, got " + shape_str(s));
  }
  Var<T> x = features;
  if (cfg_.sfu.spatial) x = sfu_spatial_compress(x, *cfg_.sfu.spatial);
  if (cfg_.sfu.channels) x = sfu_channel_compress(x, 1, *cfg_.sfu.channels);
  return x;
}

template <typename T>
Var<T> Model<T>::forward(const Var<T>& features, bool train) {
  return forward_compressed(compress(features), train);
}

template <typename T>
Var<T> Model<T>::forward_compressed(const Var<T>& compressed, bool train) {
  const auto& s = compressed.shape();
  const bool grid_ok = !cfg_.sfu.spatial || (s.size() == 5 && s[3] == *cfg_.sfu.spatial && s[4] == *cfg_.sfu.spatial);
  if (s.size() != 5 || s[1] != cfg_.out_channels() || !grid_ok) {
    throw ConfigError("input stage: compressed features must be (N," + std::to_string(cfg_.out_channels()) +
                      ",T,H,W) with the SFU grid, got " + shape_str(s));
  }
  Var<T> x = compressed;
  if (cfg_.aggregator == Aggregator::AveragePooling) {
    x = average_pool_aggregator(x);
  } else {
    for (auto& b : blocks_) x = b->forward(x, train);
  }
  return head_->forward(x);
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::tmm_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& b : blocks_)
    for (auto* p : b->parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::head_parameters() {
  return head_->parameters();
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  auto out = tmm_parameters();
  for (auto* p : head_parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, nn::BatchNormState<T>*>> Model<T>::batchnorm_states() {
  std::vector<std::pair<std::string, nn::BatchNormState<T>*>> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "tmm.block" + std::to_string(b);
    out.emplace_back(p + ".bn1", &blocks_[b]->bn1);
    out.emplace_back(p + ".bn2", &blocks_[b]->bn2);
    out.emplace_back(p + ".bn3", &blocks_[b]->bn3);
  }
  return out;
}

template <typename T>
std::int64_t Model<T>::trainable_count() {
  std::int64_t n = 0;
  for (auto* p : parameters())
    if (p->trainable()) n += p->numel();
  return n;
}

template <typename T>
TensorBundle state_dict(Model<T>& model) {
  TensorBundle out;
  for (auto* p : model.parameters()) out[p->name()] = p->value().template cast<float>();
  for (auto& [name, st] : model.batchnorm_states()) {
    out[name + ".running_mean"] = st->running_mean.template cast<float>();
    out[name + ".running_var"] = st->running_var.template cast<float>();
  }
  return out;
}

template <typename T>
std::size_t load_state_dict(Model<T>& model, const TensorBundle& state, const std::string& prefix) {
  std::size_t loaded = 0;
  auto load = [&](const std::string& name, Tensor<T>& dst) {
    if (name.rfind(prefix, 0) != 0) return;
    auto it = state.find(name);
    if (it == state.end()) throw ConfigError("checkpoint has no tensor '" + name + "'");
    if (it->second.shape() != dst.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' is " + shape_str(it->second.shape()) +
                        ", model expects " + shape_str(dst.shape()));
    }
    dst = it->second.template cast<T>();
    ++loaded;
  };
  for (auto* p : model.parameters()) load(p->name(), p->value());
  for (auto& [name, st] : model.batchnorm_states()) {
    load(name + ".running_mean", st->running_mean);
    load(name + ".running_var", st->running_var);
  }
  return loaded;
}

#define TEMPO_INSTANTIATE(T)                                                              \
  template Var<T> sfu_spatial_compress<T>(const Var<T>&, std::int64_t);                   \
  template Var<T> sfu_channel_compress<T>(const Var<T>&, int, std::int64_t);              \
  template Var<T> average_pool_aggregator<T>(const Var<T>&);                              \
  template struct R3DBlock<T>;                                                            \
  template struct MLPHead<T>;                                                             \
  template class Model<T>;                                                                \
  template TensorBundle state_dict<T>(Model<T>&);                                         \
  template std::size_t load_state_dict<T>(Model<T>&, const TensorBundle&, const std::string&);

TEMPO_INSTANTIATE(float)
TEMPO_INSTANTIATE(double)

}  // namespace tempo::model
