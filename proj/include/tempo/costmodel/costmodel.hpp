#pragma once

// Closed-form parameter and FLOP counts for a ModelConfig over a frozen
// feature input (T, C, H, W).

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/model/model.hpp"

namespace tempo::costmodel {

enum class Convention { Macs, TwoMacs };
std::string convention_name(Convention c);
Convention parse_convention(const std::string& name);

struct InputShape {
  std::int64_t t = 8;
  std::int64_t c = 64;
  std::int64_t h = 8;
  std::int64_t w = 8;
};

struct CostReport {
  std::map<std::string, std::int64_t> params_by_stage;  // ifm, sfu, tmm, head
  std::int64_t trainable_params = 0;
  std::map<std::string, double> flops_by_stage;  // sfu, tmm.conv, tmm.norm_act, aggregator, head
  Convention convention = Convention::TwoMacs;
  InputShape input;

  std::int64_t total_params() const;
  double total_flops() const;
  double tmm_conv_flops() const { return flops_by_stage.at("tmm.conv"); }
  nlohmann::json to_json() const;
};

// Per block: conv weights 3Ch + 9h^2 + hC (bias-free) and BN affine 2(2h + C);
// head C*hidden + hidden + hidden*K + K. IFM and SFU hold no trainable weights.
CostReport count_params(const model::ModelConfig& cfg);

// Conv layers: positions x kernel volume x Cin x Cout MACs, scaled by the
// convention. BN and ReLU cost 2 ops per element, residual adds and
// averaging 1. The head is counted once, after pooling.
CostReport count_flops(const model::ModelConfig& cfg, const InputShape& input,
                       Convention convention = Convention::TwoMacs);

// Both halves in one report.
CostReport cost(const model::ModelConfig& cfg, const InputShape& input,
                Convention convention = Convention::TwoMacs);

// ---- tables ---------------------------------------------------------------

enum class Axis { SpatialResolution, ChannelDim, Blocks, HiddenDim };
std::string axis_name(Axis a);
Axis parse_axis(const std::string& name);

// Base config with one axis value applied.
model::ModelConfig apply_axis(model::ModelConfig cfg, Axis axis, std::int64_t value);

struct TableRow {
  std::string label;
  std::vector<double> values;
  std::vector<double> paper;  // empty when the sweep does not match a paper axis
};

struct CostTable {
  std::string title;
  Axis axis = Axis::Blocks;
  std::vector<std::int64_t> axis_values;
  std::vector<TableRow> rows;
};

enum class Quantity { ParamsM, FlopsG };

// One row per quantity over the sweep; counts come from count_params / count_flops.
CostTable sweep_table(const std::string& title, const model::ModelConfig& base, const InputShape& input,
                      Axis axis, const std::vector<std::int64_t>& values,
                      const std::vector<Quantity>& quantities, Convention convention);

std::string to_csv(const CostTable& t);
std::string to_markdown(const CostTable& t);

// Published reference rows.
struct PaperAxis {
  Axis axis;
  std::vector<std::int64_t> values;
  std::vector<double> params_m;  // empty when not published
  std::vector<double> flops_g;
};
const PaperAxis& table2_spatial();
const PaperAxis& table2_channels();
const PaperAxis& table3_blocks();
const PaperAxis& table3_hidden();

// Configurations the paper tables were measured at: C=768 features on a
// 14 x 14 grid, 8 frames; hidden 2048 for Table 2, 256 for Table 3.
model::ModelConfig paper_base_config(std::int64_t hidden);
InputShape paper_input();

// Table 2 (spatial, channel) and Table 3 (blocks, hidden) reproductions.
std::vector<CostTable> paper_tables(Convention convention);

// Least-squares line through (x, y); returns the max |residual| / |y|.
double affine_fit_max_rel_residual(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace tempo::costmodel
