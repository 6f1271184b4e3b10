// SPDX-License-Identifier: Apache-2.0

#include "dropin/report.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"

namespace dropin {

namespace {

constexpr const char* kAbsent = "/";

std::vector<std::string> split_csv(const std::string& row) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(row);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!row.empty() && row.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const char* column) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorKind::kIo, std::string("bad number '") + s + "' in column " + column);
  }
  return v;
}

std::size_t parse_count(const std::string& s, const char* column) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorKind::kIo, std::string("bad count '") + s + "' in column " + column);
  }
  return v;
}

void check_cell(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) {
    throw Error(ErrorKind::kArgument, "report field '" + s + "' contains a CSV delimiter");
  }
}

}  // namespace

std::string to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::kBaseline: return "baseline";
    case Strategy::kDropinUnfrozen: return "dropin_unfrozen";
    case Strategy::kDropinFrozen: return "dropin_frozen";
    case Strategy::kLora: return "lora";
    case Strategy::kPlasticity: return "plasticity";
  }
  return "baseline";
}

Strategy strategy_from_string(const std::string& s) {
  for (Strategy st : all_strategies()) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorKind::kConfig, "unknown strategy '" + s +
                                      "' (expected baseline, dropin_unfrozen, dropin_frozen, lora or plasticity)");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all{Strategy::kBaseline, Strategy::kDropinUnfrozen, Strategy::kDropinFrozen,
                                         Strategy::kLora, Strategy::kPlasticity};
  return all;
}

void validate(const RunReport& r) {
  const bool plasticity = r.strategy == Strategy::kPlasticity;
  if (plasticity && (r.backward_ms_per_step || r.params_trainable)) {
    throw Error(ErrorKind::kArgument, "plasticity reports carry no backward time or trainable count");
  }
  if (!plasticity && (!r.backward_ms_per_step || !r.params_trainable)) {
    throw Error(ErrorKind::kArgument, to_string(r.strategy) + " report is missing backward time or trainable count");
  }
  if (!std::isfinite(r.test_eer_percent) || r.test_eer_percent < 0.0 || r.test_eer_percent > 100.0) {
    throw Error(ErrorKind::kArgument, "test EER percent must lie in [0, 100]");
  }
  check_cell(r.dataset);
  check_cell(r.model);
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error(ErrorKind::kArgument, "cannot format number");
  return std::string(buf, ptr);
}

std::string report_row(const RunReport& r, bool with_timing) {
  validate(r);
  std::string row = r.dataset + "," + r.model + "," + to_string(r.strategy) + "," + format_number(r.test_eer_percent) + ",";
  row += (with_timing && r.backward_ms_per_step) ? format_number(*r.backward_ms_per_step) : kAbsent;
  row += "," + std::to_string(r.params_total) + ",";
  row += r.params_trainable ? std::to_string(*r.params_trainable) : kAbsent;
  return row;
}

std::filesystem::path curves_path(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p += ".curves.jsonl";
  return p;
}

void emit_report(const RunReport& r, const std::filesystem::path& csv) {
  const std::string row = report_row(r);
  bool need_header = true;
  if (std::filesystem::exists(csv) && std::filesystem::file_size(csv) > 0) {
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    if (header != kReportHeader) throw Error(ErrorKind::kIo, csv.string() + " has a different header");
    need_header = false;
  }
  if (csv.has_parent_path()) ensure_directory(csv.parent_path());
  std::ofstream out(csv, std::ios::app);
  if (!out) throw Error(ErrorKind::kIo, "cannot write report to " + csv.string());
  if (need_header) out << kReportHeader << '\n';
  out << row << '\n';
  out.flush();
  if (!out) throw Error(ErrorKind::kIo, "failed writing " + csv.string());

  nlohmann::json curves = nlohmann::json::array();
  for (const auto& c : r.curves) {
    curves.push_back({{"stage", c.stage},
                      {"epoch", c.epoch},
                      {"train_loss", c.train_loss},
                      {"dev_eer_percent", c.dev_eer_percent}});
  }
  std::ofstream side(curves_path(csv), std::ios::app);
  if (!side) throw Error(ErrorKind::kIo, "cannot write curves next to " + csv.string());
  side << nlohmann::json{{"dataset", r.dataset}, {"model", r.model}, {"strategy", to_string(r.strategy)},
                         {"curves", curves}}
              .dump()
       << '\n';
}

RunReport parse_report_row(const std::string& row) {
  const auto cells = split_csv(row);
  if (cells.size() != 7) throw Error(ErrorKind::kIo, "report row needs 7 columns: " + row);
  RunReport r;
  r.dataset = cells[0];
  r.model = cells[1];
  r.strategy = strategy_from_string(cells[2]);
  r.test_eer_percent = parse_double(cells[3], "test_eer_percent");
  if (cells[4] != kAbsent) r.backward_ms_per_step = parse_double(cells[4], "backward_ms_per_step");
  r.params_total = parse_count(cells[5], "params_total");
  if (cells[6] != kAbsent) r.params_trainable = parse_count(cells[6], "params_trainable");
  return r;
}

std::vector<RunReport> read_reports(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + csv.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw Error(ErrorKind::kIo, csv.string() + " lacks the report header");
  std::vector<RunReport> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_report_row(line));
  }
  return out;
}

}  // namespace dropin
