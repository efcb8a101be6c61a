#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsl/errors.hpp"

namespace cfsl::train {

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string stage;
  double lr = 0.0;
  std::map<std::string, double> losses;
  std::map<std::string, double> extra;  // accuracy, ci95, ... for evaluation records
  double wall_ms = 0.0;
  std::uint64_t seed = 0;

  // Names the first non-finite value, in key order.
  void require_finite() const {
    if (!std::isfinite(lr)) throw NumericError("non-finite learning rate at step " + std::to_string(step));
    for (const auto* group : {&losses, &extra}) {
      for (const auto& [name, v] : *group) {
        if (!std::isfinite(v)) {
          throw NumericError("non-finite loss term '" + name + "' at " + stage + " step " + std::to_string(step));
        }
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j{{"step", step}, {"epoch", epoch}, {"stage", stage}, {"lr", lr}};
    j["losses"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : losses) j["losses"][k] = v;
    for (const auto& [k, v] : extra) j[k] = v;
    j["wall_ms"] = wall_ms;
    j["seed"] = seed;
    return j;
  }
};

// Newline-delimited JSON, one record per line, flushed per record.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, bool append) : path_(path) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!os_) throw DataError("cannot open metrics file " + path.string());
  }

  void write(const MetricsRecord& r) {
    r.require_finite();
    os_ << r.to_json().dump() << '\n';
    os_.flush();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

inline std::vector<nlohmann::ordered_json> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing metrics file: " + path.string(), DataError::Kind::kMissingFile);
  std::vector<nlohmann::ordered_json> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::ordered_json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what(), DataError::Kind::kFormat);
    }
  }
  return out;
}

}  // namespace cfsl::train
