// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dropin {

enum class Strategy { kBaseline, kDropinUnfrozen, kDropinFrozen, kLora, kPlasticity };

std::string to_string(Strategy strategy);
Strategy strategy_from_string(const std::string& s);
const std::vector<Strategy>& all_strategies();

struct CurvePoint {
  std::string stage;  // "train", "initial", "expanded", "pruned", ...
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_eer_percent = 0.0;

  bool operator==(const CurvePoint&) const = default;
};

/// One row of the strategy comparison table plus its training curves.
struct RunReport {
  std::string dataset;
  std::string model;
  Strategy strategy = Strategy::kBaseline;
  double test_eer_percent = 0.0;
  std::optional<double> backward_ms_per_step;  // absent for plasticity
  std::size_t params_total = 0;
  std::optional<std::size_t> params_trainable;  // absent for plasticity
  std::vector<CurvePoint> curves;

  bool operator==(const RunReport&) const = default;
};

inline constexpr std::string_view kReportHeader =
    "dataset,model,strategy,test_eer_percent,backward_ms_per_step,params_total,params_trainable";

/// Throws Error(kArgument) unless absent fields match the strategy.
void validate(const RunReport& report);

/// Shortest decimal text that parses back to the same double.
std::string format_number(double v);

/// CSV row without trailing newline. With `with_timing` false the timing
/// column is rendered as "/" (used for determinism comparisons).
std::string report_row(const RunReport& report, bool with_timing = true);

/// Appends one row to `csv` (writing the header first if the file is new or
/// empty) and appends the curves as one JSON line to `csv` + ".curves.jsonl".
void emit_report(const RunReport& report, const std::filesystem::path& csv);

/// Parses a report CSV written by emit_report (curves are not restored).
std::vector<RunReport> read_reports(const std::filesystem::path& csv);
RunReport parse_report_row(const std::string& row);

std::filesystem::path curves_path(const std::filesystem::path& csv);

}  // namespace dropin
