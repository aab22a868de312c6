#include "tempo/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tempo/core/error.hpp"
#include "tempo/core/log.hpp"
#include "tempo/model/checkpoint.hpp"

namespace tempo::trainer {

namespace fs = std::filesystem;
using model::Model;
using tasks::ClipPlan;

std::string phase_name(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

std::int64_t TrainRecipe::videos_per_step() const { return std::max<std::int64_t>(1, batch_size / clips_per_video); }

std::int64_t TrainRecipe::steps_per_epoch(std::int64_t n_train_videos) const {
  if (n_train_videos < 1) throw InputError("no training videos");
  const std::int64_t v = videos_per_step();
  return (n_train_videos + v - 1) / v;
}

std::int64_t TrainRecipe::total_steps(std::int64_t n_train_videos) const {
  return epochs * steps_per_epoch(n_train_videos);
}

void TrainRecipe::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (clips_per_video < 1) throw ConfigError("clips per video must be positive");
  if (batch_size % clips_per_video != 0 && batch_size > clips_per_video) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " is not a multiple of clips per video " +
                      std::to_string(clips_per_video));
  }
  if (clip_length < 1) throw ConfigError("clip length must be positive");
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw ConfigError("crop fraction must be in (0, 1]");
}

TrainRecipe TrainRecipe::pretrain_default() { return TrainRecipe{}; }

TrainRecipe TrainRecipe::finetune_default() {
  TrainRecipe r;
  r.phase = Phase::Finetune;
  r.epochs = 30;
  r.weight_decay = 5e-3;
  r.clips_per_video = 1;
  return r;
}

nlohmann::json to_json(const TrainRecipe& r) {
  return {{"phase", phase_name(r.phase)},
          {"epochs", r.epochs},
          {"batch_size", r.batch_size},
          {"eta", r.eta},
          {"weight_decay", r.weight_decay},
          {"clip_length", r.clip_length},
          {"clips_per_video", r.clips_per_video},
          {"seed", r.seed},
          {"crop_fraction", r.crop_fraction},
          {"freeze_tmm", r.freeze_tmm}};
}

TrainRecipe recipe_from_json(const nlohmann::json& j) {
  TrainRecipe r;
  try {
    const auto phase = j.at("phase").get<std::string>();
    if (phase == "pretrain") {
      r.phase = Phase::Pretrain;
    } else if (phase == "finetune") {
      r.phase = Phase::Finetune;
    } else {
      throw ConfigError("unknown phase '" + phase + "'");
    }
    r.epochs = j.at("epochs").get<std::int64_t>();
    r.batch_size = j.at("batch_size").get<std::int64_t>();
    r.eta = j.at("eta").get<double>();
    r.weight_decay = j.at("weight_decay").get<double>();
    r.clip_length = j.at("clip_length").get<std::int64_t>();
    r.clips_per_video = j.at("clips_per_video").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.crop_fraction = j.at("crop_fraction").get<double>();
    r.freeze_tmm = j.at("freeze_tmm").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed recipe: ") + e.what());
  }
  return r;
}

std::vector<std::int64_t> DataContext::train_indices() const {
  return tasks::split_indices(videos, data::Split::Train);
}

std::vector<std::int64_t> DataContext::val_indices() const {
  return tasks::split_indices(videos, data::Split::Val);
}

nlohmann::json TrainLog::to_json() const {
  return {{"step_losses", step_losses},
          {"epoch_losses", epoch_losses},
          {"data_digest", data_digest},
          {"ifm_checksum_before", ifm_checksum_before},
          {"ifm_checksum_after", ifm_checksum_after},
          {"steps", steps},
          {"total_steps", total_steps},
          {"resumed", resumed}};
}

model::ModelConfig prp_model_config(model::ModelConfig cfg, const tasks::PRPConfig& prp) {
  cfg.head.n_classes = prp.n_classes();
  return cfg;
}

namespace {

std::uint64_t fnv_update(std::uint64_t h, const std::string& s) {
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

std::string plan_key(const ClipPlan& p) {
  std::ostringstream o;
  o << p.video << ',' << p.start << ',' << p.rate << ',' << p.length << ',' << p.crop_x << ',' << p.crop_w
    << ',' << p.label << ';';
  return o.str();
}

std::vector<std::int64_t> epoch_order(const TrainRecipe& r, const std::vector<std::int64_t>& train,
                                      std::int64_t epoch) {
  auto order = train;
  Rng rng(r.seed, phase_name(r.phase) + "/order", static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i) {
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
  return order;
}

std::string ifm_sum(const DataContext& d) { return d.ifm_checksum ? d.ifm_checksum() : std::string(); }

void check_data(const DataContext& d) {
  if (d.provider == nullptr) throw ConfigError("no feature provider");
  if (d.frames < 1 || d.grid_w < 1) throw ConfigError("data context lacks frame count or grid width");
}

struct LoopState {
  std::int64_t step = 0;
  std::uint64_t digest = 0xCBF29CE484222325ull;
  std::vector<double> losses;
  bool resumed = false;
};

std::string grad_report(const std::vector<nn::Parameter<float>*>& params) {
  std::ostringstream o;
  for (auto* p : params) {
    double ss = 0;
    for (float g : p->grad().data()) ss += static_cast<double>(g) * g;
    o << "\n  " << p->name() << " |grad| = " << std::sqrt(ss);
  }
  return o.str();
}

model::TensorBundle full_state(Model<float>& m, nn::AdamW<float>& opt) {
  auto bundle = model::state_dict(m);
  const auto& ps = opt.params();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    bundle["optim.m." + ps[k]->name()] = opt.first_moments()[k];
    bundle["optim.v." + ps[k]->name()] = opt.second_moments()[k];
  }
  return bundle;
}

void save_state(const fs::path& dir, Model<float>& m, nn::AdamW<float>& opt, const TrainRecipe& r,
                const LoopState& st) {
  model::CheckpointInfo info;
  info.config = model::to_json(m.config());
  info.step = st.step;
  info.extra = {{"recipe", to_json(r)},
                {"optimizer_steps", opt.steps_taken()},
                {"digest", hex64(st.digest)},
                {"losses", st.losses}};
  model::save_checkpoint(dir, full_state(m, opt), info);
}

bool try_resume(const fs::path& dir, Model<float>& m, nn::AdamW<float>& opt, const TrainRecipe& r,
                LoopState& st) {
  if (!fs::exists(dir / "manifest.json")) return false;
  const auto ck = model::load_checkpoint(dir);
  if (ck.info.extra.at("recipe") != to_json(r)) {
    throw ConfigError("checkpoint in " + dir.string() + " was written by a different recipe");
  }
  if (ck.info.config != model::to_json(m.config())) {
    throw ConfigError("checkpoint in " + dir.string() + " was written for a different model config");
  }
  model::load_state_dict(m, ck.tensors);
  const auto& ps = opt.params();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    opt.first_moments()[k] = ck.tensors.at("optim.m." + ps[k]->name());
    opt.second_moments()[k] = ck.tensors.at("optim.v." + ps[k]->name());
  }
  opt.set_steps_taken(ck.info.extra.at("optimizer_steps").get<std::int64_t>());
  st.step = ck.info.step;
  st.digest = parse_hex64(ck.info.extra.at("digest").get<std::string>());
  st.losses = ck.info.extra.at("losses").get<std::vector<double>>();
  st.resumed = true;
  return true;
}

// Shared optimisation loop. Returns the log; `model` holds the trained weights.
TrainLog run_loop(const TrainRecipe& r, const DataContext& data, Model<float>& m,
                  const tasks::PRPConfig& prp, tasks::Task task, const TrainOptions& opts) {
  const auto train = data.train_indices();
  const std::int64_t spe = r.steps_per_epoch(static_cast<std::int64_t>(train.size()));
  const std::int64_t total = r.epochs * spe;

  TrainLog log;
  log.total_steps = total;
  log.ifm_checksum_before = ifm_sum(data);

  auto params = m.parameters();
  if (r.freeze_tmm)
    for (auto* p : m.tmm_parameters()) p->set_trainable(false);

  nn::OptimizerConfig oc;
  oc.weight_decay = r.weight_decay;
  oc.lr_coeff = r.eta;
  oc.batch_size = r.batch_size;
  oc.total_steps = std::max<std::int64_t>(1, total);
  nn::AdamW<float> opt(params, oc);

  LoopState st;
  const fs::path ckdir = opts.checkpoint_dir.empty() ? fs::path() : opts.checkpoint_dir / "latest";
  if (!ckdir.empty() && opts.resume) try_resume(ckdir, m, opt, r, st);
  log.resumed = st.resumed;
  if (!opts.loss_log.empty() && !st.resumed) fs::remove(opts.loss_log);

  const std::int64_t stop = opts.stop_after >= 0 ? std::min(opts.stop_after, total) : total;
  const auto labels_of = [](const std::vector<ClipPlan>& plans) {
    std::vector<std::int64_t> l;
    for (const auto& p : plans) l.push_back(p.label);
    return l;
  };

  while (st.step < stop) {
    const auto plans = step_plans(r, data, prp, task, st.step);
    for (const auto& p : plans) st.digest = fnv_update(st.digest, plan_key(p));
    const auto batch = tasks::make_batch(*data.provider, data.videos, plans, m.config().sfu);
    for (auto* p : params) p->zero_grad();
    const double lr = nn::cosine_lr(st.step, total, r.max_lr());
    const auto diverged = [&](const std::string& what) {
      return NumericError(phase_name(r.phase) + " diverged at step " + std::to_string(st.step) + " (lr " +
                          std::to_string(lr) + ", " + what + ")" + grad_report(params));
    };
    const auto labels = labels_of(plans);
    double value = 0;
    try {
      const auto logits = m.forward_compressed(nn::Var<float>(batch.features), true);
      const auto loss = nn::softmax_cross_entropy(logits, std::span<const std::int64_t>(labels));
      nn::backward(loss);
      value = loss.value().raw()[0];
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
    bool finite = std::isfinite(value);
    for (auto* p : params)
      for (float g : p->grad().data()) finite = finite && std::isfinite(g);
    if (!finite) throw diverged("loss " + std::to_string(value));
    opt.step(lr);
    st.losses.push_back(value);
    ++st.step;
    if (!opts.loss_log.empty()) {
      tasks::append_jsonl(opts.loss_log.string(),
                          {{"step", st.step - 1}, {"epoch", (st.step - 1) / spe}, {"loss", value}, {"lr", lr}});
    }
    const bool epoch_end = st.step % spe == 0;
    if (epoch_end) {
      log_info(phase_name(r.phase) + " epoch " + std::to_string(st.step / spe) + "/" +
               std::to_string(r.epochs) + " loss " + std::to_string(value));
    }
    const bool due = opts.checkpoint_every > 0 ? st.step % opts.checkpoint_every == 0 : epoch_end;
    if (!ckdir.empty() && (due || st.step == stop)) save_state(ckdir, m, opt, r, st);
  }

  if (!ckdir.empty() && st.step == 0 && total == 0) save_state(ckdir, m, opt, r, st);
  log.step_losses = st.losses;
  for (std::int64_t e = 0; (e + 1) * spe <= static_cast<std::int64_t>(st.losses.size()); ++e) {
    double s = 0;
    for (std::int64_t i = e * spe; i < (e + 1) * spe; ++i) s += st.losses[static_cast<std::size_t>(i)];
    log.epoch_losses.push_back(s / static_cast<double>(spe));
  }
  log.steps = st.step;
  log.data_digest = hex64(st.digest);
  log.ifm_checksum_after = ifm_sum(data);
  if (log.ifm_checksum_after != log.ifm_checksum_before) {
    throw NumericError("frozen encoder changed during " + phase_name(r.phase));
  }
  return log;
}

std::string tmm_dims(const model::ModelConfig& c) {
  std::ostringstream o;
  o << "n_blocks=" << c.tmm.n_blocks << " hidden=" << c.tmm.hidden << " io=" << c.tmm.io
    << " in_channels=" << c.in_channels << " sfu.spatial="
    << (c.sfu.spatial ? std::to_string(*c.sfu.spatial) : "none")
    << " sfu.channels=" << (c.sfu.channels ? std::to_string(*c.sfu.channels) : "none");
  return o.str();
}

}  // namespace

std::vector<ClipPlan> step_plans(const TrainRecipe& r, const DataContext& data, const tasks::PRPConfig& prp,
                                 tasks::Task task, std::int64_t step) {
  const auto train = data.train_indices();
  const std::int64_t spe = r.steps_per_epoch(static_cast<std::int64_t>(train.size()));
  const std::int64_t epoch = step / spe, within = step % spe;
  const auto order = epoch_order(r, train, epoch);
  const std::int64_t vps = r.videos_per_step();
  const auto begin = order.begin() + within * vps;
  const auto end = order.begin() + std::min<std::int64_t>((within + 1) * vps, static_cast<std::int64_t>(order.size()));
  const std::vector<std::int64_t> chosen(begin, end);

  Rng aug(r.seed, phase_name(r.phase) + "/augment", static_cast<std::uint64_t>(step));
  if (r.phase == Phase::Pretrain) {
    auto cfg = prp;
    cfg.clip_length = r.clip_length;
    cfg.clips_per_video = r.clips_per_video;
    return tasks::sample_prp_plans(cfg, data.videos, chosen, data.frames, data.grid_w, r.crop_fraction, aug);
  }
  const std::int64_t cw = tasks::crop_width(data.grid_w, r.crop_fraction);
  const std::int64_t length = std::min(r.clip_length, data.frames);
  std::vector<ClipPlan> plans;
  for (auto v : chosen) {
    for (std::int64_t k = 0; k < r.clips_per_video; ++k) {
      ClipPlan p;
      p.video = v;
      p.rate = 1;
      p.length = length;
      p.start = aug.uniform_int(0, data.frames - length);
      p.crop_w = cw;
      p.crop_x = aug.uniform_int(0, data.grid_w - cw);
      p.label = tasks::label_for(data.videos[static_cast<std::size_t>(v)], task);
      plans.push_back(p);
    }
  }
  return plans;
}

PretrainResult pretrain(const TrainRecipe& recipe, const DataContext& data, const model::ModelConfig& model_cfg,
                        const tasks::PRPConfig& prp, const TrainOptions& opts) {
  recipe.validate();
  prp.validate();
  check_data(data);
  if (recipe.phase != Phase::Pretrain) throw ConfigError("pretrain needs a pretrain recipe");
  const auto cfg = prp_model_config(model_cfg, prp);
  PretrainResult out;
  out.model = std::make_unique<Model<float>>(cfg, derive_seed(recipe.seed, "init"));
  out.log = run_loop(recipe, data, *out.model, prp, tasks::Task::Motion, opts);
  const auto val = data.val_indices();
  if (!val.empty()) {
    out.val_prp_accuracy = tasks::evaluate_prp(*out.model, *data.provider, data.videos, val, prp, data.frames,
                                               recipe.crop_fraction, derive_seed(recipe.seed, "prp-val"));
  }
  return out;
}

PretrainedTmm extract_tmm(Model<float>& m) {
  PretrainedTmm t;
  t.config = m.config();
  for (auto& [name, tensor] : model::state_dict(m))
    if (name.rfind("tmm.", 0) == 0) t.state[name] = tensor;
  return t;
}

FinetuneResult finetune(const TrainRecipe& recipe, const DataContext& data, const model::ModelConfig& model_cfg,
                        tasks::Task task, const std::optional<PretrainedTmm>& init, const tasks::EvalConfig& eval,
                        const TrainOptions& opts) {
  recipe.validate();
  eval.validate();
  check_data(data);
  model_cfg.validate();
  if (recipe.phase != Phase::Finetune) throw ConfigError("finetune needs a finetune recipe");
  for (const auto& v : data.videos) {
    if (tasks::label_for(v, task) >= model_cfg.head.n_classes) {
      throw ConfigError("head has " + std::to_string(model_cfg.head.n_classes) + " classes but " + v.id +
                        " has " + tasks::task_name(task) + " label " + std::to_string(tasks::label_for(v, task)));
    }
  }
  FinetuneResult out;
  out.model = std::make_unique<Model<float>>(model_cfg, derive_seed(recipe.seed, "init"));
  if (init) {
    const auto& pc = init->config;
    const bool same = pc.tmm.n_blocks == model_cfg.tmm.n_blocks && pc.tmm.hidden == model_cfg.tmm.hidden &&
                      pc.tmm.io == model_cfg.tmm.io && pc.in_channels == model_cfg.in_channels &&
                      pc.sfu.spatial == model_cfg.sfu.spatial && pc.sfu.channels == model_cfg.sfu.channels &&
                      model_cfg.aggregator == model::Aggregator::Tmm;
    if (!same) {
      throw ConfigError("pretrained TMM (" + tmm_dims(pc) + ") does not match fine-tune config (" +
                        tmm_dims(model_cfg) + ")");
    }
    model::load_state_dict(*out.model, init->state, "tmm.");
  }
  tasks::PRPConfig unused;
  out.log = run_loop(recipe, data, *out.model, unused, task, opts);
  out.accuracy = tasks::evaluate_accuracy(*out.model, *data.provider, data.videos, data.val_indices(), task,
                                          data.frames, eval);
  return out;
}

}  // namespace tempo::trainer
