#pragma once

#include <optional>
#include <string>
#include <vector>

#include "csme/csv.hpp"
#include "csme/estimators.hpp"
#include "csme/simlab.hpp"

namespace csme {

struct ColumnRoles {
  std::string outcome;
  std::vector<std::string> covariates;
  std::vector<std::string> exposures;
  std::optional<std::string> sample_weight;
  std::optional<std::string> case_indicator;
  std::optional<std::string> replicate_group;
  std::vector<std::string> true_exposures;  // optional, parallel to exposures
};

struct SigmaSource {
  enum class Kind { literal, replicates, grid, grid_scales };
  Kind kind = Kind::literal;
  MatrixXd literal;
  std::string replicates_path;
  bool diagonal = false;
  std::vector<MatrixXd> grid;
  std::vector<double> grid_scales;  // multiples of the measured exposure variances
};

struct RunConfig {
  std::string data_path;
  ColumnRoles columns;
  EstimatorRequest request;  // sigma_me filled from the source at run time
  SigmaSource sigma;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  std::optional<std::string> out_dir;
};

// Parses the JSON run configuration; errors carry the offending key or the
// parser's position for malformed documents.
RunConfig parse_run_config(const std::string& path);

// Round-trip serialization of model specifications (used by the config file
// and by design files).
std::string design_to_json(const DesignSpec& spec, const std::vector<std::string>& covariate_names,
                           const std::vector<std::string>& exposure_names);
DesignSpec design_from_json_string(const std::string& json_text,
                                   const std::vector<std::string>& covariate_names,
                                   const std::vector<std::string>& exposure_names);

Dataset load_dataset(const CsvTable& table, const ColumnRoles& roles);

// Resolves the Sigma_me matrices implied by the source (literal, estimated
// from a replicate CSV, or a grid) against the loaded data.
std::vector<MatrixXd> resolve_sigma_grid(const SigmaSource& source, const Dataset& data);

// Study design file: {"design": "sim1", "n": ..., "R": ..., "seed": ...,
// "dose_grid": {...}} with the grid applied to standardization-based cells.
StudyDesign parse_design_file(const std::string& path);

// FNV-1a hash of a file's bytes; stamped into every output manifest.
std::uint64_t hash_file(const std::string& path);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace csme
