#include "tempo/costmodel/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "tempo/core/error.hpp"

namespace tempo::costmodel {

std::string convention_name(Convention c) { return c == Convention::Macs ? "macs" : "2macs"; }

Convention parse_convention(const std::string& name) {
  if (name == "macs" || name == "1macs") return Convention::Macs;
  if (name == "2macs") return Convention::TwoMacs;
  throw ConfigError("unknown FLOP convention '" + name + "' (expected macs or 2macs)");
}

std::int64_t CostReport::total_params() const {
  std::int64_t s = 0;
  for (const auto& [k, v] : params_by_stage) s += v;
  return s;
}

double CostReport::total_flops() const {
  double s = 0;
  for (const auto& [k, v] : flops_by_stage) s += v;
  return s;
}

nlohmann::json CostReport::to_json() const {
  return {{"params_by_stage", params_by_stage},
          {"trainable_params", trainable_params},
          {"total_params", total_params()},
          {"flops_by_stage", flops_by_stage},
          {"total_flops", total_flops()},
          {"convention", convention_name(convention)},
          {"input_shape", {input.t, input.c, input.h, input.w}}};
}

CostReport count_params(const model::ModelConfig& cfg) {
  cfg.validate();
  CostReport r;
  const std::int64_t c = cfg.out_channels(), h = cfg.tmm.hidden;
  std::int64_t tmm = 0;
  if (cfg.aggregator == model::Aggregator::Tmm) {
    const std::int64_t per_block = 3 * c * h + 9 * h * h + h * c + 2 * (2 * h + c);
    tmm = cfg.tmm.n_blocks * per_block;
  }
  const std::int64_t hid = cfg.head.hidden, k = cfg.head.n_classes;
  r.params_by_stage = {{"ifm", 0}, {"sfu", 0}, {"tmm", tmm}, {"head", c * hid + hid + hid * k + k}};
  r.trainable_params = r.params_by_stage["tmm"] + r.params_by_stage["head"];
  return r;
}

CostReport count_flops(const model::ModelConfig& cfg, const InputShape& in, Convention convention) {
  cfg.validate();
  if (in.t < 1 || in.c != cfg.in_channels || in.h < 1 || in.w < 1) {
    throw ConfigError("input shape does not match the model's input channels");
  }
  if (cfg.sfu.spatial && (*cfg.sfu.spatial > in.h || *cfg.sfu.spatial > in.w)) {
    throw ConfigError("spatial target exceeds the input grid");
  }
  CostReport r;
  r.convention = convention;
  r.input = in;
  const double mac = convention == Convention::Macs ? 1.0 : 2.0;
  const double s_h = static_cast<double>(cfg.sfu.spatial.value_or(in.h));
  const double s_w = static_cast<double>(cfg.sfu.spatial.value_or(in.w));
  const double c = static_cast<double>(cfg.out_channels()), h = static_cast<double>(cfg.tmm.hidden);
  const double t = static_cast<double>(in.t);
  const double pos = t * s_h * s_w;

  double sfu = 0;
  if (cfg.sfu.spatial && (*cfg.sfu.spatial != in.h || *cfg.sfu.spatial != in.w)) {
    sfu += t * static_cast<double>(in.c * in.h * in.w);
  }
  if (cfg.sfu.channels) sfu += t * static_cast<double>(in.c) * s_h * s_w;

  double conv = 0, norm_act = 0, agg = 0;
  if (cfg.aggregator == model::Aggregator::Tmm) {
    const double blocks = static_cast<double>(cfg.tmm.n_blocks);
    conv = blocks * mac * pos * (3.0 * c * h + 9.0 * h * h + h * c);
    norm_act = blocks * pos * (8.0 * h + 5.0 * c);
    agg = c * pos;  // global pool in the head
  } else {
    agg = c * pos;  // mean over time, then over the grid
  }
  const double hid = static_cast<double>(cfg.head.hidden), k = static_cast<double>(cfg.head.n_classes);
  const double head = mac * (c * hid + hid * k) + hid + k + 2.0 * hid;

  r.flops_by_stage = {{"sfu", sfu}, {"tmm.conv", conv}, {"tmm.norm_act", norm_act}, {"pool", agg}, {"head", head}};
  return r;
}

CostReport cost(const model::ModelConfig& cfg, const InputShape& input, Convention convention) {
  auto r = count_flops(cfg, input, convention);
  const auto p = count_params(cfg);
  r.params_by_stage = p.params_by_stage;
  r.trainable_params = p.trainable_params;
  return r;
}

std::string axis_name(Axis a) {
  switch (a) {
    case Axis::SpatialResolution: return "spatial";
    case Axis::ChannelDim: return "channels";
    case Axis::Blocks: return "blocks";
    case Axis::HiddenDim: return "hidden";
  }
  return "";
}

Axis parse_axis(const std::string& name) {
  if (name == "spatial") return Axis::SpatialResolution;
  if (name == "channels") return Axis::ChannelDim;
  if (name == "blocks") return Axis::Blocks;
  if (name == "hidden") return Axis::HiddenDim;
  throw ConfigError("unknown cost axis '" + name + "' (expected spatial, channels, blocks or hidden)");
}

namespace {

std::string axis_label(Axis a) {
  switch (a) {
    case Axis::SpatialResolution: return "#Sp. res.";
    case Axis::ChannelDim: return "#Ch. dim.";
    case Axis::Blocks: return "#Block";
    case Axis::HiddenDim: return "#Hidden ch. dim.";
  }
  return "";
}

std::string quantity_label(Quantity q) { return q == Quantity::ParamsM ? "#Params. (M)" : "Flops (G)"; }

const PaperAxis* matching_paper_axis(Axis axis, const std::vector<std::int64_t>& values) {
  for (const PaperAxis* p : {&table2_spatial(), &table2_channels(), &table3_blocks(), &table3_hidden()}) {
    if (p->axis == axis && p->values == values) return p;
  }
  return nullptr;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

model::ModelConfig apply_axis(model::ModelConfig cfg, Axis axis, std::int64_t value) {
  switch (axis) {
    case Axis::SpatialResolution:
      cfg.sfu.spatial = value;
      break;
    case Axis::ChannelDim:
      cfg.sfu.channels = value;
      cfg.tmm.io = value;
      break;
    case Axis::Blocks:
      cfg.tmm.n_blocks = value;
      break;
    case Axis::HiddenDim:
      cfg.tmm.hidden = value;
      break;
  }
  return cfg;
}

CostTable sweep_table(const std::string& title, const model::ModelConfig& base, const InputShape& input,
                      Axis axis, const std::vector<std::int64_t>& values, const std::vector<Quantity>& quantities,
                      Convention convention) {
  CostTable t;
  t.title = title;
  t.axis = axis;
  t.axis_values = values;
  if (values.empty()) return t;
  const PaperAxis* paper = matching_paper_axis(axis, values);
  for (auto q : quantities) {
    TableRow row;
    row.label = quantity_label(q);
    for (auto v : values) {
      const auto r = cost(apply_axis(base, axis, v), input, convention);
      row.values.push_back(q == Quantity::ParamsM ? static_cast<double>(r.trainable_params) / 1e6
                                                  : r.total_flops() / 1e9);
    }
    if (paper) row.paper = q == Quantity::ParamsM ? paper->params_m : paper->flops_g;
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string to_csv(const CostTable& t) {
  std::ostringstream o;
  o << axis_label(t.axis);
  for (auto v : t.axis_values) o << ',' << v;
  o << '\n';
  for (const auto& row : t.rows) {
    o << row.label;
    for (double v : row.values) o << ',' << fmt(v);
    o << '\n';
    if (!row.paper.empty()) {
      o << row.label << " paper";
      for (double v : row.paper) o << ',' << fmt(v);
      o << '\n';
    }
  }
  return o.str();
}

std::string to_markdown(const CostTable& t) {
  std::ostringstream o;
  if (!t.title.empty()) o << "### " << t.title << "\n\n";
  o << "| " << axis_label(t.axis) << " |";
  for (auto v : t.axis_values) o << ' ' << v << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < t.axis_values.size(); ++i) o << "---|";
  o << '\n';
  for (const auto& row : t.rows) {
    o << "| " << row.label << " |";
    for (double v : row.values) o << ' ' << fmt(v) << " |";
    o << '\n';
    if (!row.paper.empty()) {
      o << "| " << row.label << " paper |";
      for (double v : row.paper) o << ' ' << fmt(v) << " |";
      o << '\n';
    }
  }
  return o.str();
}

const PaperAxis& table2_spatial() {
  static const PaperAxis p{Axis::SpatialResolution, {14, 9, 5, 3, 1}, {}, {66.18, 27.35, 8.44, 3.04, 0.34}};
  return p;
}

const PaperAxis& table2_channels() {
  static const PaperAxis p{Axis::ChannelDim, {768, 192, 48, 12, 3}, {}, {66.18, 63.40, 62.71, 62.53, 62.49}};
  return p;
}

const PaperAxis& table3_blocks() {
  static const PaperAxis p{Axis::Blocks,
                           {1, 2, 4, 6, 8},
                           {1.84, 2.95, 5.18, 7.41, 9.63},
                           {2.88, 4.62, 8.12, 11.61, 15.11}};
  return p;
}

const PaperAxis& table3_hidden() {
  static const PaperAxis p{Axis::HiddenDim,
                           {64, 256, 512, 1024, 2048},
                           {0.94, 1.84, 4.07, 12.06, 42.21},
                           {1.47, 2.88, 6.37, 18.91, 66.18}};
  return p;
}

model::ModelConfig paper_base_config(std::int64_t hidden) {
  model::ModelConfig cfg;
  cfg.in_channels = 768;
  cfg.grid_h = cfg.grid_w = 14;
  cfg.tmm = {1, hidden, 768};
  cfg.head = {1024, 4};
  return cfg;
}

InputShape paper_input() { return {8, 768, 14, 14}; }

std::vector<CostTable> paper_tables(Convention convention) {
  const auto in = paper_input();
  return {
      sweep_table("Table 2 (spatial resolution)", paper_base_config(2048), in, Axis::SpatialResolution,
                  table2_spatial().values, {Quantity::FlopsG}, convention),
      sweep_table("Table 2 (channel dimension)", paper_base_config(2048), in, Axis::ChannelDim,
                  table2_channels().values, {Quantity::FlopsG}, convention),
      sweep_table("Table 3 (blocks, hidden 256)", paper_base_config(256), in, Axis::Blocks,
                  table3_blocks().values, {Quantity::ParamsM, Quantity::FlopsG}, convention),
      sweep_table("Table 3 (hidden dim, 1 block)", paper_base_config(256), in, Axis::HiddenDim,
                  table3_hidden().values, {Quantity::ParamsM, Quantity::FlopsG}, convention),
  };
}

double affine_fit_max_rel_residual(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("affine fit needs two or more paired points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double icept = (sy - slope * sx) / n;
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, std::abs(y[i] - (slope * x[i] + icept)) / std::abs(y[i]));
  }
  return worst;
}

}  // namespace tempo::costmodel
