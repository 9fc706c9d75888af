#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace stlt {

struct MetricRow {
  std::size_t epoch = 0;
  std::string split;   // train, validation, test, finetune
  std::string metric;  // loss, top1, top5, map, layout_top1, ...
  double value = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct MetricsReport {
  std::string config_hash;
  std::vector<MetricRow> rows;
  // Kept out of the CSV so that identical runs export identical files.
  double wall_clock_seconds = 0.0;

  // Appends a row; epochs must not decrease.
  void add(std::size_t epoch, const std::string& split, const std::string& metric, double value);
  // Values of one split/metric series in epoch order.
  std::vector<double> series(const std::string& split, const std::string& metric) const;
};

// 64-bit FNV-1a of the text, as 16 hex digits.
std::string text_hash(const std::string& text);

// Shortest decimal that parses back to the same double, independent of the
// C locale.
std::string format_double(double v);
double parse_double(const std::string& s);

// CSV "epoch,split,metric,value" with one row per entry.
void export_report(const MetricsReport& report, const std::filesystem::path& path);
std::vector<MetricRow> read_report_csv(const std::filesystem::path& path);

}  // namespace stlt
