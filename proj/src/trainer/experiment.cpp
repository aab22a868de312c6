#include "tempo/trainer/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "tempo/core/error.hpp"
#include "tempo/core/log.hpp"
#include "tempo/data/corpus_io.hpp"
#include "tempo/ifm/feature_cache.hpp"
#include "tempo/model/checkpoint.hpp"

namespace tempo::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json recipe_json(const TrainRecipe& r) {
  auto j = to_json(r);
  j.erase("phase");
  j.erase("seed");
  return j;
}

TrainRecipe recipe_of(json j, Phase phase, std::uint64_t seed) {
  j["phase"] = phase_name(phase);
  j["seed"] = seed;
  return recipe_from_json(j);
}

json opt_json(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

std::optional<std::int64_t> opt_of(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::int64_t>();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_null() || b.is_null()) return true;
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, p);
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

// Dotted key as written, or with a "model." prefix for model settings.
std::string resolve_key(const json& j, const std::string& dotted) {
  const auto exists = [&](const std::string& key) {
    const json* cur = &j;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!cur->is_object() || !cur->contains(part)) return false;
      cur = &(*cur)[part];
    }
    return true;
  };
  if (exists(dotted)) return dotted;
  if (exists("model." + dotted)) return "model." + dotted;
  throw ConfigError("unknown config key '" + dotted + "'");
}

json log_json(const TrainLog& log) {
  auto j = log.to_json();
  return j;
}

TrainLog log_of(const json& j) {
  TrainLog l;
  l.step_losses = j.at("step_losses").get<std::vector<double>>();
  l.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  l.data_digest = j.at("data_digest").get<std::string>();
  l.ifm_checksum_before = j.at("ifm_checksum_before").get<std::string>();
  l.ifm_checksum_after = j.at("ifm_checksum_after").get<std::string>();
  l.steps = j.at("steps").get<std::int64_t>();
  l.total_steps = j.at("total_steps").get<std::int64_t>();
  l.resumed = j.at("resumed").get<bool>();
  return l;
}

json arm_summary(const TrainLog& log, double acc) {
  return {{"accuracy", acc},
          {"steps", log.steps},
          {"data_digest", log.data_digest},
          {"epoch_losses", log.epoch_losses},
          {"ifm_checksum_before", log.ifm_checksum_before},
          {"ifm_checksum_after", log.ifm_checksum_after}};
}

std::mutex& pretrain_lock(const std::string& key) {
  static std::mutex guard;
  static std::unordered_map<std::string, std::unique_ptr<std::mutex>> locks;
  std::lock_guard<std::mutex> g(guard);
  auto& m = locks[key];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

}  // namespace

void merge_strict(json& base, const json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw ConfigError("config" + (path.empty() ? "" : " section '" + path + "'") + " must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else {
      if (!same_kind(slot, value)) {
        throw ConfigError("config key '" + here + "' expects " + std::string(slot.type_name()) + ", got " +
                          value.type_name());
      }
      slot = value;
    }
  }
}

void set_dotted(json& j, const std::string& dotted, const std::string& text) {
  const std::string key = resolve_key(j, dotted);
  json overlay = parse_value(text);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = json{{*it, overlay}};
  merge_strict(j, overlay);
}

json RunConfig::to_json() const {
  return {{"corpus", data::spec_to_json(corpus)},
          {"corpus_dir", corpus_dir},
          {"stub", {{"patch_size", stub.patch_size}, {"feature_dim", stub.feature_dim}, {"depth", stub.depth}, {"seed", stub.seed}}},
          {"features_dir", features_dir},
          {"model",
           {{"sfu", {{"spatial", opt_json(sfu.spatial)}, {"channels", opt_json(sfu.channels)}}},
            {"tmm", {{"n_blocks", tmm_blocks}, {"hidden", tmm_hidden}}},
            {"head", {{"hidden", head_hidden}}},
            {"aggregator", model::aggregator_name(aggregator)}}},
          {"prp", {{"rate_set", prp.rate_set}, {"clip_length", prp.clip_length}, {"clips_per_video", prp.clips_per_video}}},
          {"pretrain", recipe_json(pretrain)},
          {"finetune", recipe_json(finetune)},
          {"eval",
           {{"temporal_views", eval.temporal_views},
            {"spatial_views", eval.spatial_views},
            {"clip_length", eval.clip_length},
            {"crop_fraction", eval.crop_fraction}}},
          {"task", tasks::task_name(task)},
          {"seed", seed},
          {"out_dir", out_dir},
          {"cache_dir", cache_dir}};
}

RunConfig RunConfig::from_json(const json& overlay) {
  json j = RunConfig{}.to_json();
  merge_strict(j, overlay);
  RunConfig c;
  try {
    c.corpus = data::spec_from_json(j.at("corpus"));
    c.corpus_dir = j.at("corpus_dir").get<std::string>();
    const auto& s = j.at("stub");
    c.stub = {s.at("patch_size").get<std::int64_t>(), s.at("feature_dim").get<std::int64_t>(),
              s.at("depth").get<std::int64_t>(), s.at("seed").get<std::uint64_t>()};
    c.features_dir = j.at("features_dir").get<std::string>();
    const auto& m = j.at("model");
    c.sfu.spatial = opt_of(m.at("sfu").at("spatial"));
    c.sfu.channels = opt_of(m.at("sfu").at("channels"));
    c.tmm_blocks = m.at("tmm").at("n_blocks").get<std::int64_t>();
    c.tmm_hidden = m.at("tmm").at("hidden").get<std::int64_t>();
    c.head_hidden = m.at("head").at("hidden").get<std::int64_t>();
    c.aggregator = model::parse_aggregator(m.at("aggregator").get<std::string>());
    c.prp.rate_set = j.at("prp").at("rate_set").get<std::vector<std::int64_t>>();
    c.prp.clip_length = j.at("prp").at("clip_length").get<std::int64_t>();
    c.prp.clips_per_video = j.at("prp").at("clips_per_video").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pretrain = recipe_of(j.at("pretrain"), Phase::Pretrain, c.seed);
    c.finetune = recipe_of(j.at("finetune"), Phase::Finetune, c.seed);
    const auto& e = j.at("eval");
    c.eval = {e.at("temporal_views").get<std::int64_t>(), e.at("spatial_views").get<std::int64_t>(),
              e.at("clip_length").get<std::int64_t>(), e.at("crop_fraction").get<double>()};
    c.task = tasks::parse_task(j.at("task").get<std::string>());
    c.out_dir = j.at("out_dir").get<std::string>();
    c.cache_dir = j.at("cache_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

model::ModelConfig RunConfig::model_config(std::int64_t in_channels, std::int64_t grid_h, std::int64_t grid_w) const {
  model::ModelConfig m;
  m.in_channels = in_channels;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  m.sfu = sfu;
  m.tmm = {tmm_blocks, tmm_hidden, sfu.channels.value_or(in_channels)};
  m.head = {head_hidden, task == tasks::Task::Appearance ? corpus.appearance_classes : corpus.motion_classes};
  m.aggregator = aggregator;
  return m;
}

void RunConfig::validate() const {
  prp.validate();
  pretrain.validate();
  finetune.validate();
  eval.validate();
  if (features_dir.empty()) {
    stub.validate();
    data::validate(corpus, {stub.patch_size, std::max(prp.clip_length, eval.clip_length), prp.max_rate()});
    model_config(stub.feature_dim, corpus.height / stub.patch_size, corpus.width / stub.patch_size).validate();
  }
}

RunConfig load_run_config(const fs::path& file, const std::vector<std::string>& overrides) {
  json j = RunConfig{}.to_json();
  if (!file.empty()) merge_strict(j, read_json(file));
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_dotted(j, o.substr(0, eq), o.substr(eq + 1));
  }
  return RunConfig::from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  auto j = cfg.to_json();
  j.erase("seed");
  j.erase("out_dir");
  j.erase("cache_dir");
  return hex64(hash_string(j.dump()));
}

std::string pretrain_hash(const RunConfig& cfg) {
  auto j = cfg.to_json();
  json k = {{"corpus", j["corpus"]},
            {"corpus_dir", j["corpus_dir"]},
            {"stub", j["stub"]},
            {"features_dir", j["features_dir"]},
            {"sfu", j["model"]["sfu"]},
            {"tmm", j["model"]["tmm"]},
            {"head", j["model"]["head"]},
            {"aggregator", j["model"]["aggregator"]},
            {"prp", j["prp"]},
            {"pretrain", j["pretrain"]}};
  return hex64(hash_string(k.dump()));
}

// ---- data ------------------------------------------------------------------

RunData::RunData(const RunConfig& cfg) {
  cfg.validate();
  fs::path corpus_dir;
  if (!cfg.corpus_dir.empty()) {
    corpus_dir = cfg.corpus_dir;
    if (!fs::exists(corpus_dir / "manifest.json")) {
      throw InputError("no corpus at " + corpus_dir.string() + "; run `tempo gen-data --out " + corpus_dir.string() +
                       "` first");
    }
    const auto manifest = data::read_manifest(corpus_dir);
    spec_ = manifest.spec;
    videos_ = manifest.videos;
  } else {
    spec_ = cfg.corpus;
    videos_ = data::corpus_index(spec_);
  }
  if (videos_.empty()) throw InputError("corpus has no videos");

  if (!cfg.features_dir.empty()) {
    if (!fs::is_directory(cfg.features_dir)) throw InputError("feature directory " + cfg.features_dir + " does not exist");
    provider_ = std::make_unique<ifm::ImportedFeatures>(cfg.features_dir);
    const auto shape = provider_->frame_shape(videos_.front().id);
    channels_ = shape[0];
    grid_h_ = shape[1];
    grid_w_ = shape[2];
    ctx_.frames = provider_->video(videos_.front().id).frames();
  } else {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < videos_.size(); ++i) index[videos_[i].id] = i;
    const auto spec = spec_;
    const auto videos = videos_;
    ifm::PixelLoader loader = [spec, videos, index, corpus_dir](const std::string& id) {
      const auto it = index.find(id);
      if (it == index.end()) throw InputError("unknown video " + id);
      const auto& meta = videos[it->second];
      return corpus_dir.empty() ? data::render_video(spec, meta).frames : data::load_video(corpus_dir, meta).frames;
    };
    auto cache = std::make_unique<ifm::StubFeatureCache>(cfg.cache_dir, cfg.stub, spec_, loader);
    auto* raw = cache.get();
    ctx_.ifm_checksum = [raw] { return raw->encoder().checksum(); };
    provider_ = std::move(cache);
    channels_ = cfg.stub.feature_dim;
    grid_h_ = spec_.height / cfg.stub.patch_size;
    grid_w_ = spec_.width / cfg.stub.patch_size;
    ctx_.frames = spec_.frames;
  }
  ctx_.videos = videos_;
  ctx_.provider = provider_.get();
  ctx_.grid_w = grid_w_;
}

RunData::~RunData() = default;

std::int64_t RunData::n_classes(tasks::Task task) const {
  std::int64_t k = 2;
  for (const auto& v : videos_) k = std::max(k, tasks::label_for(v, task) + 1);
  return k;
}

model::ModelConfig RunData::model_config(const RunConfig& cfg) const {
  auto m = cfg.model_config(channels_, grid_h_, grid_w_);
  m.head.n_classes = n_classes(cfg.task);
  m.validate();
  return m;
}

// ---- runs ------------------------------------------------------------------

std::optional<PretrainArtifact> pretrain_cached(const RunConfig& cfg, RunData& data) {
  const auto mcfg = data.model_config(cfg);
  const fs::path dir = fs::path(cfg.out_dir) / "pretrain" / pretrain_hash(cfg) / std::to_string(cfg.seed);
  std::lock_guard<std::mutex> lock(pretrain_lock(dir.string()));
  const fs::path result = dir / "result.json";
  PretrainArtifact art;
  if (fs::exists(result)) {
    const auto j = read_json(result);
    const auto ck = model::load_checkpoint(dir / "latest");
    model::Model<float> m(prp_model_config(mcfg, cfg.prp), 0);
    model::load_state_dict(m, ck.tensors);
    art.tmm = extract_tmm(m);
    art.log = log_of(j.at("log"));
    art.val_prp_accuracy = j.at("val_prp_accuracy").get<double>();
    log_info("reusing pretraining in " + dir.string());
    if (!data.context().ifm_checksum || art.log.ifm_checksum_after != data.context().ifm_checksum()) {
      if (data.context().ifm_checksum) throw NumericError("cached pretraining used a different frozen encoder");
    }
    return art;
  }
  fs::create_directories(dir);
  write_json(dir / "recipe.json", to_json(cfg.pretrain));
  TrainOptions opts{dir, 0, -1, true, dir / "loss.jsonl"};
  auto res = pretrain(cfg.pretrain, data.context(), mcfg, cfg.prp, opts);
  art.tmm = extract_tmm(*res.model);
  art.log = res.log;
  art.val_prp_accuracy = res.val_prp_accuracy;
  write_json(result, {{"log", log_json(res.log)},
                      {"val_prp_accuracy", res.val_prp_accuracy},
                      {"model", model::to_json(res.model->config())},
                      {"recipe", to_json(cfg.pretrain)}});
  return art;
}

namespace {

RunResult result_from_metrics(const fs::path& dir, const json& j) {
  RunResult r;
  r.dir = dir;
  const auto& m = j.at("metrics");
  r.metrics.acc_ft = m.at("acc_ft").get<double>();
  r.metrics.acc_scratch = m.at("acc_scratch").get<double>();
  r.metrics.delta_acc = m.at("delta_acc").get<double>();
  r.metrics.per_epoch_losses = m.at("per_epoch_losses").get<std::vector<double>>();
  r.metrics.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
  r.prp_val_accuracy = j.at("prp_val_accuracy").get<double>();
  r.extra = j;
  return r;
}

}  // namespace

RunResult run_point(const RunConfig& cfg, const std::string& sweep, const json& axes) {
  const fs::path dir = fs::path(cfg.out_dir) / sweep / config_hash(cfg) / std::to_string(cfg.seed);
  const fs::path metrics_file = dir / "metrics.json";
  if (fs::exists(metrics_file)) {
    const auto j = read_json(metrics_file);
    if (j.value("status", "") == "ok" && j.at("run_config") == cfg.to_json()) {
      auto r = result_from_metrics(dir, j);
      r.cached = true;
      return r;
    }
  }
  fs::create_directories(dir);
  write_json(dir / "run_config.json", cfg.to_json());
  write_json(dir / "pretrain_recipe.json", to_json(cfg.pretrain));
  write_json(dir / "finetune_recipe.json", to_json(cfg.finetune));

  RunData data(cfg);
  const auto mcfg = data.model_config(cfg);
  const auto pre = cfg.aggregator == model::Aggregator::Tmm ? pretrain_cached(cfg, data) : std::nullopt;

  const auto arm = [&](const std::string& name, const std::optional<PretrainedTmm>& init) {
    TrainOptions o{dir / "checkpoints" / name, 0, -1, true, dir / ("loss_" + name + ".jsonl")};
    return finetune(cfg.finetune, data.context(), mcfg, cfg.task, init, cfg.eval, o);
  };

  json out = {{"status", "ok"},
              {"sweep", sweep},
              {"axes", axes},
              {"seed", cfg.seed},
              {"config_hash", config_hash(cfg)},
              {"task", tasks::task_name(cfg.task)},
              {"run_config", cfg.to_json()}};
  tasks::MetricsReport report;
  report.seeds = {cfg.seed};
  double prp_acc = -1;
  if (pre) {
    auto ft = arm("ft", pre->tmm);
    auto scratch = arm("scratch", std::nullopt);
    const bool parity = ft.log.data_digest == scratch.log.data_digest && ft.log.steps == scratch.log.steps;
    if (!parity) throw NumericError("fine-tuning arms diverged in data order or step count");
    report = tasks::MetricsReport::paired(ft.accuracy, scratch.accuracy);
    report.seeds = {cfg.seed};
    report.per_epoch_losses = pre->log.epoch_losses;
    prp_acc = pre->val_prp_accuracy;
    out["pretrained"] = true;
    out["budget_parity"] = parity;
    out["pretrain"] = {{"epoch_losses", pre->log.epoch_losses},
                       {"steps", pre->log.steps},
                       {"ifm_checksum_before", pre->log.ifm_checksum_before},
                       {"ifm_checksum_after", pre->log.ifm_checksum_after}};
    out["ft"] = arm_summary(ft.log, ft.accuracy);
    out["scratch"] = arm_summary(scratch.log, scratch.accuracy);
  } else {
    auto scratch = arm("scratch", std::nullopt);
    report = tasks::MetricsReport::paired(scratch.accuracy, scratch.accuracy);
    report.seeds = {cfg.seed};
    out["pretrained"] = false;
    out["scratch"] = arm_summary(scratch.log, scratch.accuracy);
  }
  out["metrics"] = report.to_json();
  out["prp_val_accuracy"] = prp_acc;
  write_json(metrics_file, out);
  return result_from_metrics(dir, out);
}

SweepAxis parse_axis_spec(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw ConfigError("--axis expects key=v1,v2,..., got '" + spec + "'");
  }
  SweepAxis a;
  a.key = spec.substr(0, eq);
  std::stringstream ss(spec.substr(eq + 1));
  for (std::string v; std::getline(ss, v, ',');) a.values.push_back(parse_value(v));
  return a;
}

std::vector<RunResult> run_experiment(const RunConfig& base, const std::string& sweep,
                                      const std::vector<SweepAxis>& axes, const std::vector<std::uint64_t>& seeds,
                                      int parallel) {
  struct Point {
    json config;
    json axes;
  };
  std::vector<Point> points{{base.to_json(), json::object()}};
  for (const auto& axis : axes) {
    if (axis.values.empty()) throw ConfigError("axis '" + axis.key + "' has no values");
    std::vector<Point> next;
    for (const auto& p : points) {
      for (const auto& v : axis.values) {
        Point q = p;
        set_dotted(q.config, axis.key, v.dump());
        q.axes[axis.key] = v;
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  struct Job {
    json config;
    json axes;
  };
  std::vector<Job> jobs;
  for (const auto& p : points) {
    for (auto seed : seeds) {
      Job j{p.config, p.axes};
      j.config["seed"] = seed;
      jobs.push_back(std::move(j));
    }
  }
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const auto cfg = RunConfig::from_json(jobs[i].config);
        results[i] = run_point(cfg, sweep, jobs[i].axes);
      } catch (const std::exception& e) {
        RunResult r;
        r.failed = true;
        r.error = e.what();
        r.extra = {{"axes", jobs[i].axes}, {"seed", jobs[i].config["seed"]}};
        log_warn("run failed (" + jobs[i].axes.dump() + ", seed " + jobs[i].config["seed"].dump() + "): " + e.what());
        try {
          const auto cfg = RunConfig::from_json(jobs[i].config);
          r.dir = fs::path(cfg.out_dir) / sweep / config_hash(cfg) / std::to_string(cfg.seed);
          write_json(r.dir / "metrics.json", {{"status", "failed"},
                                               {"error", r.error},
                                               {"sweep", sweep},
                                               {"axes", jobs[i].axes},
                                               {"seed", cfg.seed},
                                               {"config_hash", config_hash(cfg)},
                                               {"task", tasks::task_name(cfg.task)}});
        } catch (const std::exception&) {
        }
        results[i] = std::move(r);
      }
    }
  };
  const int n = std::max(1, std::min<int>(parallel, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

std::string report_csv(const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::exists(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<json> rows;
  std::set<std::string> axis_keys;
  for (const auto& f : files) {
    auto j = read_json(f);
    const auto axes = j.value("axes", json::object());
    for (const auto& [k, v] : axes.items()) axis_keys.insert(k);
    rows.push_back(std::move(j));
  }
  const auto cell = [](const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_null()) return std::string("none");
    return v.dump();
  };
  std::ostringstream o;
  o << "sweep,config_hash,task";
  for (const auto& k : axis_keys) o << ',' << k;
  o << ",acc_ft,acc_scratch,delta_acc,prp_val_accuracy,seed,status\n";
  for (const auto& j : rows) {
    o << j.value("sweep", "") << ',' << j.value("config_hash", "") << ',' << j.value("task", "");
    const auto axes = j.value("axes", json::object());
    for (const auto& k : axis_keys) o << ',' << (axes.contains(k) ? cell(axes[k]) : "");
    if (j.value("status", "") == "ok") {
      const auto& m = j.at("metrics");
      o << ',' << m.at("acc_ft").dump() << ',' << m.at("acc_scratch").dump() << ',' << m.at("delta_acc").dump() << ','
        << j.at("prp_val_accuracy").dump();
    } else {
      o << ",,,,";
    }
    o << ',' << j.value("seed", json(0)).dump() << ',' << j.value("status", "unknown") << '\n';
  }
  return o.str();
}

}  // namespace tempo::trainer
