#include "csme/csv.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace csme {

Index CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DataError("column not found in CSV: " + name);
  return static_cast<Index>(it - header.begin());
}

VectorXd CsvTable::column_values(const std::string& name) const {
  const Index c = column(name);
  VectorXd out(n_rows());
  for (Index i = 0; i < n_rows(); ++i)
    out(i) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
  return out;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file: " + path);

  CsvTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') continue;  // manifest/comment lines
    auto cells = split_line(line);
    if (table.header.empty()) {
      table.header = std::move(cells);
      continue;
    }
    if (cells.size() != table.header.size())
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " +
                      std::to_string(table.header.size()) + " cells, found " +
                      std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string& s = cells[c];
      double v = 0.0;
      const char* begin = s.data();
      const char* end = s.data() + s.size();
      while (begin != end && (*begin == ' ' || *begin == '\t')) ++begin;
      auto [p, ec] = std::from_chars(begin, end, v);
      while (p != end && (*p == ' ' || *p == '\t')) ++p;
      if (ec != std::errc{} || p != end)
        throw DataError(path + ":" + std::to_string(lineno) + ": cell '" + s + "' in column '" +
                        table.header[c] + "' is not numeric");
      row[c] = v;
    }
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw DataError(path + ": missing header row");
  return table;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

}  // namespace csme
