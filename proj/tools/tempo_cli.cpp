// tempo: command-line entry point.
//
// exit codes: 0 ok, 1 other failure, 2 config/input error, 3 numeric failure,
// 4 gate failure (gradcheck)

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tempo/core/error.hpp"
#include "tempo/core/log.hpp"
#include "tempo/costmodel/costmodel.hpp"
#include "tempo/data/corpus_io.hpp"
#include "tempo/model/checkpoint.hpp"
#include "tempo/model/grad_suite.hpp"
#include "tempo/trainer/experiment.hpp"

namespace fs = std::filesystem;
using namespace tempo;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string features;
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "run config JSON");
    app->add_option("--set", sets, "override a leaf, key=value (dotted path)")->take_all();
    app->add_option("--out", out, "output directory");
    app->add_option("--seed", seed, "seed");
    app->add_option("--features", features, "imported AVFS feature directory (replaces the stub encoder)");
    app->add_flag("--quiet", quiet, "warnings only");
  }

  trainer::RunConfig load() const {
    auto sets2 = sets;
    if (seed) sets2.push_back("seed=" + std::to_string(*seed));
    if (!features.empty()) sets2.push_back("features_dir=\"" + features + "\"");
    auto cfg = trainer::load_run_config(config, sets2);
    if (!out.empty()) cfg.out_dir = out;
    cfg = trainer::RunConfig::from_json(cfg.to_json());
    return cfg;
  }
};

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

int cmd_gen_data(const Common& c) {
  auto cfg = c.load();
  const fs::path dir = !c.out.empty() ? fs::path(c.out) : !cfg.corpus_dir.empty() ? fs::path(cfg.corpus_dir) : fs::path("corpus");
  const auto m = data::write_corpus(dir, cfg.corpus,
                                    {cfg.stub.patch_size, std::max(cfg.prp.clip_length, cfg.eval.clip_length),
                                     cfg.prp.max_rate()});
  std::cout << "wrote " << m.videos.size() << " videos to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const auto cfg = c.load();
  trainer::RunData data(cfg);
  const auto art = trainer::pretrain_cached(cfg, data);
  print_json({{"pretrain_hash", trainer::pretrain_hash(cfg)},
              {"seed", cfg.seed},
              {"val_prp_accuracy", art->val_prp_accuracy},
              {"final_epoch_loss", art->log.epoch_losses.empty() ? json(nullptr) : json(art->log.epoch_losses.back())},
              {"steps", art->log.steps},
              {"ifm_checksum_before", art->log.ifm_checksum_before},
              {"ifm_checksum_after", art->log.ifm_checksum_after}});
  return 0;
}

int cmd_finetune(const Common& c, const std::string& name) {
  const auto cfg = c.load();
  const auto r = trainer::run_point(cfg, name);
  print_json({{"dir", r.dir.string()}, {"cached", r.cached}, {"metrics", r.metrics.to_json()},
              {"prp_val_accuracy", r.prp_val_accuracy}});
  return 0;
}

int cmd_eval(const std::string& run_dir) {
  const fs::path dir(run_dir);
  std::ifstream in(dir / "run_config.json");
  if (!in) throw InputError("no run_config.json in " + dir.string());
  const auto cfg = trainer::RunConfig::from_json(json::parse(in));
  trainer::RunData data(cfg);
  const auto mcfg = data.model_config(cfg);
  json out = {{"dir", dir.string()}};
  for (const char* arm : {"ft", "scratch"}) {
    const auto ck_dir = dir / "checkpoints" / arm / "latest";
    if (!fs::exists(ck_dir)) continue;
    model::Model<float> m(mcfg, 0);
    model::load_state_dict(m, model::load_checkpoint(ck_dir).tensors);
    out[std::string("acc_") + arm] =
        tasks::evaluate_accuracy(m, *data.context().provider, data.context().videos, data.context().val_indices(),
                                 cfg.task, data.context().frames, cfg.eval);
  }
  std::ifstream mf(dir / "metrics.json");
  if (mf) {
    const auto stored = json::parse(mf);
    if (stored.value("status", "") == "ok") {
      const auto& sm = stored.at("metrics");
      bool same = true;
      for (const char* arm : {"ft", "scratch"}) {
        const std::string k = std::string("acc_") + arm;
        if (out.contains(k)) same = same && out[k] == sm.at(k);
      }
      out["matches_metrics_json"] = same;
    }
  }
  print_json(out);
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  for (std::string s; std::getline(ss, s, ',');) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + s + "' in --seeds");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds is empty");
  return seeds;
}

// Mean and sample std of acc_ft, acc_scratch and delta per sweep point.
std::string comparison_table(const std::vector<trainer::RunResult>& results,
                             const std::vector<trainer::SweepAxis>& axes) {
  std::map<std::string, std::vector<const trainer::RunResult*>> groups;
  std::vector<std::string> order;
  for (const auto& r : results) {
    const auto key = r.extra.value("axes", json::object()).dump();
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  const auto stats = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
    return fmt(m) + " ± " + fmt(s);
  };
  std::ostringstream o;
  o << "|";
  for (const auto& a : axes) o << " " << a.key << " |";
  o << " Acc_ft | Acc_scratch | ΔAcc | seeds | failed |\n|";
  for (std::size_t i = 0; i < axes.size() + 5; ++i) o << "---|";
  o << "\n";
  for (const auto& key : order) {
    const auto ax = json::parse(key);
    std::vector<double> ft, sc, d;
    int failed = 0;
    for (const auto* r : groups[key]) {
      if (r->failed) {
        ++failed;
        continue;
      }
      ft.push_back(r->metrics.acc_ft);
      sc.push_back(r->metrics.acc_scratch);
      d.push_back(r->metrics.delta_acc);
    }
    o << "|";
    for (const auto& a : axes) o << " " << (ax.contains(a.key) ? ax[a.key].dump() : "") << " |";
    if (ft.empty()) {
      o << " - | - | - | 0 | " << failed << " |\n";
    } else {
      o << " " << stats(ft) << " | " << stats(sc) << " | " << stats(d) << " | " << ft.size() << " | " << failed
        << " |\n";
    }
  }
  return o.str();
}

int cmd_sweep(const Common& c, const std::string& name, const std::vector<std::string>& axis_specs,
              const std::string& seeds_text, int parallel) {
  const auto cfg = c.load();
  std::vector<trainer::SweepAxis> axes;
  for (const auto& a : axis_specs) axes.push_back(trainer::parse_axis_spec(a));
  const auto seeds = seeds_text.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seeds(seeds_text);
  const auto results = trainer::run_experiment(cfg, name, axes, seeds, parallel);
  const auto table = comparison_table(results, axes);
  const fs::path root = fs::path(cfg.out_dir) / name;
  fs::create_directories(root);
  std::ofstream(root / "comparison.md") << table;
  std::ofstream(root / "report.csv") << trainer::report_csv(root);
  std::cout << table;
  int failed = 0;
  for (const auto& r : results) {
    if (r.failed) {
      ++failed;
      std::cerr << "failed: " << r.extra.dump() << ": " << r.error << "\n";
    }
  }
  return failed ? 1 : 0;
}

int cmd_cost(const Common& c, bool paper, const std::string& convention, const std::string& format) {
  const auto conv = costmodel::parse_convention(convention);
  if (format != "json" && format != "table") throw ConfigError("--format must be json or table");
  if (paper) {
    const auto tables = costmodel::paper_tables(conv);
    const fs::path dir = c.out.empty() ? fs::path("cost") : fs::path(c.out);
    fs::create_directories(dir);
    const char* names[] = {"table2_spatial", "table2_channels", "table3_blocks", "table3_hidden"};
    std::ofstream md(dir / "paper_tables.md");
    for (std::size_t i = 0; i < tables.size(); ++i) {
      std::ofstream(dir / (std::string(names[i]) + ".csv")) << costmodel::to_csv(tables[i]);
      md << costmodel::to_markdown(tables[i]) << "\n";
      std::cout << costmodel::to_markdown(tables[i]) << "\n";
    }
    std::cout << "convention: " << costmodel::convention_name(conv) << "; files in " << dir.string() << "\n";
    return 0;
  }
  const auto cfg = c.load();
  model::ModelConfig mcfg;
  costmodel::InputShape in;
  if (cfg.features_dir.empty()) {
    const std::int64_t gh = cfg.corpus.height / cfg.stub.patch_size, gw = cfg.corpus.width / cfg.stub.patch_size;
    mcfg = cfg.model_config(cfg.stub.feature_dim, gh, gw);
    in = {cfg.eval.clip_length, cfg.stub.feature_dim, gh, gw};
  } else {
    trainer::RunData data(cfg);
    mcfg = data.model_config(cfg);
    in = {cfg.eval.clip_length, mcfg.in_channels, mcfg.grid_h, mcfg.grid_w};
  }
  const auto r = costmodel::cost(mcfg, in, conv);
  if (format == "json") {
    print_json(r.to_json());
  } else {
    std::cout << "| stage | params | flops |\n|---|---|---|\n";
    for (const auto& [k, v] : r.params_by_stage) std::cout << "| " << k << " | " << v << " | |\n";
    for (const auto& [k, v] : r.flops_by_stage) std::cout << "| " << k << " | | " << fmt(v, 0) << " |\n";
    std::cout << "| total | " << r.total_params() << " (trainable " << r.trainable_params << ") | "
              << fmt(r.total_flops(), 0) << " |\n";
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto results = model::gradient_suite(seed);
  bool ok = true;
  std::printf("%-26s %12s %10s %8s %s\n", "op", "max_rel_err", "tolerance", "coords", "status");
  for (const auto& r : results) {
    std::printf("%-26s %12.3e %10.0e %8lld %s\n", r.name.c_str(), r.max_rel_err, r.tolerance,
                static_cast<long long>(r.coords_checked), r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? 0 : 4;
}

int cmd_report(const std::string& root, const std::string& out) {
  if (!fs::exists(root)) throw InputError("no run directory " + root);
  const auto csv = trainer::report_csv(root);
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(out) << csv;
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tempo: temporal modeling on frozen image features"};
  app.require_subcommand(1);
  std::map<std::string, Common> common;
  const auto sub = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    common[name].attach(s);
    return s;
  };

  sub("gen-data", "render the synthetic corpus to disk");
  sub("pretrain", "PRP pretraining (cached by configuration)");
  std::string run_name = "runs";
  auto* ft = sub("finetune", "paired fine-tuning: from the PRP checkpoint and from scratch");
  ft->add_option("--name", run_name, "run group under the output directory");

  auto* ev = app.add_subcommand("eval", "re-evaluate the checkpoints of a run directory");
  std::string run_dir;
  ev->add_option("--run", run_dir, "run directory")->required();

  auto* sw = sub("sweep", "run a grid of configurations over seeds");
  std::vector<std::string> axis_specs;
  std::string seeds_text, sweep_name = "sweep";
  int parallel = 1;
  sw->add_option("--axis", axis_specs, "key=v1,v2,... (repeatable)")->required();
  sw->add_option("--seeds", seeds_text, "comma-separated seeds (default: --seed)");
  sw->add_option("--parallel", parallel, "concurrent runs")->check(CLI::PositiveNumber);
  sw->add_option("--name", sweep_name, "sweep name");

  auto* co = sub("cost", "parameter and FLOP counts");
  bool paper = false;
  std::string convention = "2macs", format = "table";
  co->add_flag("--paper-tables", paper, "reproduce the published cost tables");
  co->add_option("--convention", convention, "macs or 2macs");
  co->add_option("--format", format, "json or table");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed, "seed");

  auto* rp = app.add_subcommand("report", "flatten run directories to CSV");
  std::string report_root = "runs", report_out;
  rp->add_option("--root", report_root, "directory to scan");
  rp->add_option("--out", report_out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (auto* s : app.get_subcommands()) {
      const std::string name = s->get_name();
      if (common.count(name) && common[name].quiet) set_log_level(LogLevel::Warn);
      if (name == "gen-data") return cmd_gen_data(common[name]);
      if (name == "pretrain") return cmd_pretrain(common[name]);
      if (name == "finetune") return cmd_finetune(common[name], run_name);
      if (name == "eval") return cmd_eval(run_dir);
      if (name == "sweep") return cmd_sweep(common[name], sweep_name, axis_specs, seeds_text, parallel);
      if (name == "cost") return cmd_cost(common[name], paper, convention, format);
      if (name == "gradcheck") return cmd_gradcheck(gc_seed);
      if (name == "report") return cmd_report(report_root, report_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
