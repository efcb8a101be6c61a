#pragma once

// Flattens a metrics stream into CSV and a short text summary. Numbers are
// copied as their JSON text, so CSV cells match the source files verbatim.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cfsl/train/metrics.hpp"

namespace cfsl::cli {

struct ReportSummary {
  std::size_t records = 0;
  std::map<std::string, std::size_t> stage_records;
  std::vector<std::string> columns;
  double first_total = std::numeric_limits<double>::quiet_NaN();
  double last_total = std::numeric_limits<double>::quiet_NaN();
  double min_total = std::numeric_limits<double>::quiet_NaN();
  std::string accuracy, ci95, episodes;  // last evaluation record, verbatim
};

namespace detail {

inline const std::vector<std::string>& fixed_head() {
  static const std::vector<std::string> v{"step", "epoch", "stage", "lr"};
  return v;
}

inline const std::vector<std::string>& fixed_tail() {
  static const std::vector<std::string> v{"wall_ms", "seed"};
  return v;
}

inline std::string cell(const nlohmann::ordered_json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace detail

// Columns: step, epoch, stage, lr, loss.<term> for every term seen, any
// evaluation extras (accuracy, ci95, episodes), wall_ms, seed.
inline ReportSummary write_report(const std::vector<nlohmann::ordered_json>& records, std::ostream& csv) {
  ReportSummary s;
  std::set<std::string> loss_terms;
  std::vector<std::string> extras;
  const std::set<std::string> known{"step", "epoch", "stage", "lr", "losses", "wall_ms", "seed"};
  for (const auto& r : records) {
    if (r.contains("losses")) {
      for (const auto& [k, v] : r.at("losses").items()) loss_terms.insert(k);
    }
    for (const auto& [k, v] : r.items()) {
      if (!known.count(k) && std::find(extras.begin(), extras.end(), k) == extras.end()) extras.push_back(k);
    }
  }
  s.columns = detail::fixed_head();
  for (const auto& t : loss_terms) s.columns.push_back("loss." + t);
  for (const auto& e : extras) s.columns.push_back(e);
  for (const auto& t : detail::fixed_tail()) s.columns.push_back(t);

  for (std::size_t i = 0; i < s.columns.size(); ++i) csv << (i ? "," : "") << s.columns[i];
  csv << '\n';
  for (const auto& r : records) {
    for (std::size_t i = 0; i < s.columns.size(); ++i) {
      const auto& col = s.columns[i];
      nlohmann::ordered_json v;
      if (col.rfind("loss.", 0) == 0) {
        const auto name = col.substr(5);
        if (r.contains("losses") && r.at("losses").contains(name)) v = r.at("losses").at(name);
      } else if (r.contains(col)) {
        v = r.at(col);
      }
      csv << (i ? "," : "") << detail::cell(v);
    }
    csv << '\n';

    ++s.records;
    ++s.stage_records[r.value("stage", std::string("?"))];
    if (r.contains("losses") && r.at("losses").contains("total")) {
      const double t = r.at("losses").at("total").get<double>();
      if (std::isnan(s.first_total)) s.first_total = t;
      s.last_total = t;
      s.min_total = std::isnan(s.min_total) ? t : std::min(s.min_total, t);
    }
    if (r.contains("accuracy")) {
      s.accuracy = detail::cell(r.at("accuracy"));
      s.ci95 = r.contains("ci95") ? detail::cell(r.at("ci95")) : "";
      s.episodes = r.contains("episodes") ? detail::cell(r.at("episodes")) : "";
    }
  }
  return s;
}

inline void print_summary(const ReportSummary& s, std::ostream& os) {
  os << "records: " << s.records << '\n';
  for (const auto& [stage, n] : s.stage_records) os << "  " << stage << ": " << n << '\n';
  if (!std::isnan(s.first_total)) {
    os << "total loss: first " << s.first_total << ", last " << s.last_total << ", min " << s.min_total << '\n';
  }
  if (!s.accuracy.empty()) {
    os << "accuracy: " << s.accuracy << " +/- " << s.ci95 << " (95% CI, " << s.episodes << " episodes)\n";
  }
}

// Reads `metrics`, writes `csv_path`, prints the summary. An empty stream
// still yields a header-only CSV and a warning.
inline ReportSummary report(const std::filesystem::path& metrics, const std::filesystem::path& csv_path,
                            std::ostream& out, std::ostream& err) {
  const auto records = train::read_metrics(metrics);
  if (!csv_path.parent_path().empty()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream csv(csv_path);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  auto s = write_report(records, csv);
  if (records.empty()) err << "warning: empty report, " << metrics.string() << " holds no records\n";
  print_summary(s, out);
  out << "csv: " << csv_path.string() << '\n';
  return s;
}

}  // namespace cfsl::cli
