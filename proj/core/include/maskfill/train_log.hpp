#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace maskfill {

/// Per-iteration scalar log with a fixed column set; the first column is
/// always the iteration index.
struct TrainLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) { rows.push_back(std::move(row)); }
  bool empty() const { return rows.empty(); }
  double first(std::size_t column) const { return rows.front().at(column); }
  double last(std::size_t column) const { return rows.back().at(column); }
  /// Mean of `column` over the first / last `n` rows.
  double head_mean(std::size_t column, std::size_t n) const;
  double tail_mean(std::size_t column, std::size_t n) const;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

}  // namespace maskfill
