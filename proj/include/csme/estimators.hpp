#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csme/core_data.hpp"
#include "csme/cscore.hpp"
#include "csme/mestim.hpp"
#include "csme/models.hpp"

namespace csme {

enum class Method { gformula, ipw, dr };
enum class Correction { oracle, naive, cs, rc, simex };

std::string method_name(Method m);
std::string correction_name(Correction c);

struct MccsOptions {
  Index replicates = 32;
  bool antithetic = true;
  std::uint64_t seed = 1;
};

struct SimexOptions {
  std::vector<double> lambda_grid = {0.5, 1.0, 1.5, 2.0};
  int replicates = 100;
  std::uint64_t seed = 1;
};

struct EstimatorRequest {
  Method method = Method::gformula;
  Correction correction = Correction::cs;

  std::optional<OutcomeModelSpec> outcome;     // g-formula, DR
  std::optional<MsmModelSpec> msm;             // IPW; link check for DR
  std::vector<DesignSpec> propensity_designs;  // per exposure; empty with known_sw

  // Known stabilized weights (conditionally randomized designs): propensity
  // equations are dropped from the stack. Empty vector means SW = 1.
  bool known_sw = false;
  std::optional<VectorXd> known_sw_values;

  MatrixXd sigma_me;  // m x m; empty means zero
  MccsOptions mccs;
  SimexOptions simex;

  MatrixXd dose_grid;  // G x m exposure points for eta(a); may be empty for IPW
  std::vector<std::pair<Index, Index>> contrasts;  // grid index pairs (g1, g0)

  SolveOptions solve;
  double alpha = 0.05;

  // Optional cap on real stabilized weights at this quantile (oracle/naive
  // only); defaults off.
  std::optional<double> sw_cap_quantile;
};

struct DoseResponse {
  MatrixXd grid;  // G x m
  VectorXd estimate;
  VectorXd se_uc;
  VectorXd se_bc;
  std::vector<Interval> ci_uc;
  std::vector<Interval> ci_bc;
};

struct ContrastResult {
  Index g1 = 0;
  Index g0 = 0;
  double estimate = 0.0;
  double se_uc = 0.0;
  double se_bc = 0.0;
  Interval ci_uc{0.0, 0.0};
  Interval ci_bc{0.0, 0.0};
};

struct EstimationResult {
  FitResult fit;
  std::optional<DoseResponse> dose;
  std::vector<ContrastResult> contrasts;
};

// ---- estimators ----------------------------------------------------------------

EstimationResult fit_gformula(const EstimatorRequest& req, const Dataset& data,
                              ExecMode mode = ExecMode::parallel);
EstimationResult fit_ipw(const EstimatorRequest& req, const Dataset& data,
                         ExecMode mode = ExecMode::parallel);
EstimationResult fit_dr(const EstimatorRequest& req, const Dataset& data,
                        ExecMode mode = ExecMode::parallel);

// Dispatch on req.method.
EstimationResult fit_estimator(const EstimatorRequest& req, const Dataset& data,
                               ExecMode mode = ExecMode::parallel);

// ---- comparators and supporting operations --------------------------------------

// Best linear predictor of the true exposures given (A*, L), built from sample
// moments with Cov(A) recovered as Cov(A*) - Sigma_me.
MatrixXd rc_impute(const Dataset& data, const MatrixXd& sigma_me);

// Simulation-extrapolation: refit under added noise at each lambda, average,
// fit a quadratic in lambda per coordinate, extrapolate to lambda = -1.
// Returns point estimates in the layout of the corresponding naive fit.
VectorXd simex_fit(const EstimatorRequest& req, const Dataset& data,
                   ExecMode mode = ExecMode::parallel);

// The extrapolation step alone: least-squares quadratic through (0, v0) and
// (lambda_k, col_k of v_bar), evaluated at lambda = -1, per coordinate.
VectorXd simex_extrapolate(const std::vector<double>& lambdas, const VectorXd& v0,
                           const MatrixXd& v_bar);

// Replicate-based estimate of Sigma_me (rows grouped by replicate_group).
MeCovariance estimate_me_covariance(const Dataset& data, bool diagonal_structure = false);

// Case-cohort selection: returns the selected-rows dataset with inverse
// probability of selection weights (estimated by stratum sample proportions)
// multiplied into any existing sample weights.
Dataset two_phase_weights(const Dataset& data, const std::vector<bool>& selected);

struct SensitivityCell {
  MatrixXd sigma_me;
  std::optional<EstimationResult> result;
  std::string error;
};

std::vector<SensitivityCell> sensitivity_grid(const EstimatorRequest& req, const Dataset& data,
                                              const std::vector<MatrixXd>& sigma_grid,
                                              ExecMode mode = ExecMode::parallel);

}  // namespace csme
