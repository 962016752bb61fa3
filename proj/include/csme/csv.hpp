#pragma once

#include <string>
#include <vector>

#include "csme/core_data.hpp"

namespace csme {

// Numeric CSV with a header row. Parsing uses std::from_chars, so decimal
// separators are period regardless of locale.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  Index n_rows() const { return static_cast<Index>(rows.size()); }
  Index column(const std::string& name) const;
  VectorXd column_values(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

std::string format_double(double x);

}  // namespace csme
