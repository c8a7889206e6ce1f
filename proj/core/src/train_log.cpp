#include "maskfill/train_log.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "maskfill/errors.hpp"

namespace maskfill {

double TrainLog::head_mean(std::size_t column, std::size_t n) const {
  n = std::min(n, rows.size());
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += rows[i].at(column);
  return s / double(n);
}

double TrainLog::tail_mean(std::size_t column, std::size_t n) const {
  n = std::min(n, rows.size());
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) s += rows[i].at(column);
  return s / double(n);
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      if (c == 0) {
        out << static_cast<long long>(row[c]);
      } else {
        out << row[c];
      }
    }
    out << '\n';
  }
  return out.str();
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << to_csv();
}

}  // namespace maskfill
