#include "stlt/report.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "stlt/errors.hpp"

namespace stlt {

void MetricsReport::add(std::size_t epoch, const std::string& split, const std::string& metric, double value) {
  if (!rows.empty() && epoch < rows.back().epoch) throw ConfigError("report epochs must not decrease");
  if (split.find_first_of(",\n") != std::string::npos || metric.find_first_of(",\n") != std::string::npos) {
    throw ConfigError("report names may not contain commas or newlines");
  }
  rows.push_back({epoch, split, metric, value});
}

std::vector<double> MetricsReport::series(const std::string& split, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.split == split && r.metric == metric) out.push_back(r.value);
  }
  return out;
}

std::string text_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("not a number: '" + s + "'");
  return v;
}

void export_report(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,split,metric,value\n";
  for (const auto& r : report.rows) {
    os << r.epoch << ',' << r.split << ',' << r.metric << ',' << format_double(r.value) << '\n';
  }
  if (!os) throw DataError("failed writing " + path.string());
}

std::vector<MetricRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "epoch,split,metric,value") throw DataError("report header missing");
  std::vector<MetricRow> rows;
  std::size_t number = 1;
  while (std::getline(is, line)) {
    ++number;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4) throw DataError("report line " + std::to_string(number) + ": expected 4 fields");
    MetricRow r;
    const auto res = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), r.epoch);
    if (res.ec != std::errc() || res.ptr != cells[0].data() + cells[0].size()) {
      throw DataError("report line " + std::to_string(number) + ": bad epoch");
    }
    r.split = cells[1];
    r.metric = cells[2];
    r.value = parse_double(cells[3]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace stlt
