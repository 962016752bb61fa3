#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csme/estimators.hpp"

namespace csme {

enum class DesignId {
  sim1,
  sim2,
  sim3,
  reliability_sweep,
  estimated_sigma,
  positivity,
  multiplicative,
  two_phase
};

std::optional<DesignId> parse_design_id(const std::string& name);
std::string design_id_name(DesignId id);
std::vector<std::string> known_design_names();

// What a metrics row extracts from one estimation result.
struct EstimandSpec {
  enum class Kind { gamma_all, gamma_single, eta_point, eta_contrast };
  Kind kind = Kind::gamma_single;
  std::vector<std::string> names;  // one per extracted parameter
  Index index = 0;                 // gamma_single / eta_point
};

struct MethodCell {
  std::string cell;   // scenario label ("both", "r=0.7", "main", ...)
  std::string label;  // method label ("CS DR", "Naive IPW", ...)
  EstimatorRequest request;
  EstimandSpec estimand;
  VectorXd truth;
};

// Generator variation knobs shared by the built-in designs.
struct GeneratorConfig {
  double conditional_mean_scale = 1.0;  // 4 for the near-positivity-violation design
  double sigma2_me = 0.0;               // additive error variance per mismeasured exposure
  bool multiplicative = false;
  double mult_sigma2 = 0.0;  // variance of the multiplicative N(1, s) error
  bool pilot_sigma = false;  // estimate Sigma_me from pilot replicates each replicate
  Index pilot_n = 100;
  Index pilot_k = 5;
  double subcohort_fraction = 0.0;  // >0: case-cohort selection of this control fraction
};

struct CellGroup {
  std::string label;
  GeneratorConfig gen;
  std::vector<MethodCell> methods;
};

struct StudyDesign {
  DesignId id = DesignId::sim1;
  Index n = 400;
  int replicates = 500;
  std::uint64_t seed = 1;
  double alpha = 0.05;
  std::vector<CellGroup> groups;
  // True dose-response for curve output (univariate designs); empty disables.
  std::function<double(double)> eta_truth;
};

// The built-in study configurations; n, R and seed come from the caller.
StudyDesign make_design(DesignId id, Index n, int replicates, std::uint64_t seed);

struct ReplicateData {
  Dataset data;
  MatrixXd sigma_cs;  // Sigma_me handed to correcting estimators (possibly pilot-estimated)
};

ReplicateData generate(const StudyDesign& design, std::size_t group_ordinal, int replicate);
ReplicateData generate(const StudyDesign& design, int replicate);

// Inverts reliability = Var(A) / (Var(A) + sigma2) using the analytic Var(A)
// of the named design's exposure generator.
double reliability_to_sigma(DesignId id, double reliability);

struct MetricsRow {
  std::string cell;
  std::string method;
  std::string parameter;
  double bias = 0.0;  // x100
  double ese = 0.0;
  double ase_uc = 0.0;
  double cov_uc = 0.0;
  double ase_bc = 0.0;
  double cov_bc = 0.0;
  int n_converged = 0;
  int n_failed = 0;
  bool warn = false;
};

struct AuditRow {
  int replicate = 0;
  std::string cell;
  std::string method;
  std::string parameter;
  double estimate = 0.0;
  double se_uc = 0.0;
  double se_bc = 0.0;
  bool converged = false;
};

struct CurvePoint {
  double a = 0.0;
  std::string method;
  double bias = 0.0;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;
  std::vector<AuditRow> audit;
  std::vector<CurvePoint> curve;
  bool any_warning() const {
    for (const auto& r : rows)
      if (r.warn) return true;
    return false;
  }
};

// Fits every (replicate, cell) and aggregates Bias/ESE/ASE/Coverage (x100).
// Replicates run in parallel; aggregation order is fixed, so the table is
// bit-identical for a given (design, seed) regardless of thread count.
MetricsTable run_study(const StudyDesign& design, ExecMode mode = ExecMode::parallel,
                       bool keep_audit = false);

}  // namespace csme
