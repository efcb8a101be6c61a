#pragma once

// The two pretraining ablation grids as override lists, run back to back
// under one output directory. Every row keeps the cross-entropy term.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cfsl/train/loops.hpp"

namespace cfsl::cli {

struct AblationRow {
  std::string name;
  std::vector<std::string> overrides;
};

// Eight combinations of the global self-supervised, local self-supervised and
// global supervised terms.
inline std::vector<AblationRow> pretrain_grid() {
  std::vector<AblationRow> rows;
  for (int mask : {0, 1, 2, 4, 3, 5, 6, 7}) {
    const bool gss = mask & 1, lss = mask & 2, gs = mask & 4;
    std::string name = "ce";
    if (gss) name += "+global_ss";
    if (lss) name += "+local_ss";
    if (gs) name += "+global_sup";
    rows.push_back({name,
                    {"pretrain.use_ce=true", std::string("pretrain.use_global_ss=") + (gss ? "true" : "false"),
                     std::string("pretrain.use_local_ss=") + (lss ? "true" : "false"),
                     std::string("pretrain.use_global_sup=") + (gs ? "true" : "false"),
                     "pretrain.use_vec_map=true", "pretrain.use_map_map=true"}});
  }
  return rows;
}

// Vector-map and map-map modules on top of CE + both global terms.
inline std::vector<AblationRow> local_grid() {
  std::vector<AblationRow> rows;
  for (int mask : {0, 1, 2, 3}) {
    const bool vm = mask & 1, mm = mask & 2;
    std::string name = "global";
    if (vm) name += "+vec_map";
    if (mm) name += "+map_map";
    rows.push_back({name,
                    {"pretrain.use_ce=true", "pretrain.use_global_ss=true", "pretrain.use_global_sup=true",
                     std::string("pretrain.use_local_ss=") + (mask ? "true" : "false"),
                     std::string("pretrain.use_vec_map=") + (vm ? "true" : "false"),
                     std::string("pretrain.use_map_map=") + (mm ? "true" : "false")}});
  }
  return rows;
}

inline std::vector<AblationRow> ablation_grid(const std::string& name) {
  if (name == "pretrain") return pretrain_grid();
  if (name == "local") return local_grid();
  throw ConfigError("unknown ablation grid '" + name + "', expected pretrain or local");
}

struct AblationResult {
  AblationRow row;
  std::filesystem::path dir;
  std::map<std::string, double> breakdown;  // loss terms of the last step
};

// `base` holds user overrides; each row's flags are appended, so they win.
inline std::vector<AblationResult> run_ablation(const std::string& grid, const std::optional<std::filesystem::path>& config,
                                                const std::vector<std::string>& base,
                                                const std::filesystem::path& out_dir,
                                                const std::function<void(const AblationResult&)>& on_row = {}) {
  std::vector<AblationResult> results;
  for (const auto& row : ablation_grid(grid)) {
    auto overrides = base;
    overrides.insert(overrides.end(), row.overrides.begin(), row.overrides.end());
    auto cfg = train::load_config(config, overrides);
    cfg.stage = "pretrain";
    const auto dir = out_dir / grid / row.name;
    const auto res = train::pretrain_loop(cfg, dir);
    const auto records = train::read_metrics(res.metrics);
    AblationResult r{row, dir, {}};
    if (!records.empty()) {
      for (const auto& [k, v] : records.back().at("losses").items()) r.breakdown[k] = v.get<double>();
    }
    if (on_row) on_row(r);
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace cfsl::cli
