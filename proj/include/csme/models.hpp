#pragma once

#include <optional>
#include <string>
#include <vector>

#include "csme/core_data.hpp"
#include "csme/cscore.hpp"

namespace csme {

// One multiplicative factor of a design term: a covariate or exposure column
// raised to an integer power.
struct Factor {
  bool is_exposure = false;
  Index index = 0;
  int power = 1;
};

// A design term is a product of factors; the empty product is the intercept,
// which is carried as a flag instead.
struct Term {
  std::vector<Factor> factors;
};

struct DesignSpec {
  bool intercept = true;
  std::vector<Term> terms;

  Index n_cols() const { return (intercept ? 1 : 0) + static_cast<Index>(terms.size()); }
  bool has_exposure_covariate_interaction() const;
};

// Checks factor indices/powers against the data shape. Exposure factors can be
// forbidden (propensity mean models) or covariate factors forbidden (MSMs).
void validate_design(const DesignSpec& spec, Index n_covariates, Index n_exposures,
                     bool allow_covariates, bool allow_exposures, const std::string& what);

struct OutcomeModelSpec {
  DesignSpec design;
  Link link = Link::identity;
};

struct MsmModelSpec {
  DesignSpec design;  // exposure terms only
  Link link = Link::identity;
};

double inv_link(double lp, Link link);
double inv_link_derivative(double lp, Link link);

// ---- mean model evaluation ---------------------------------------------------

double evaluate_mean(const DesignSpec& design, Link link, const VectorXd& beta,
                     const VectorXd& l_row, const VectorXd& a_row);
Cplx evaluate_mean(const DesignSpec& design, Link link, const VectorXd& beta,
                   const VectorXd& l_row, const Cplx* a_row);

VectorXd mean_gradient(const DesignSpec& design, Link link, const VectorXd& beta,
                       const VectorXd& l_row, const VectorXd& a_row);
void mean_gradient(const DesignSpec& design, Link link, const VectorXd& beta,
                   const VectorXd& l_row, const Cplx* a_row, Cplx* out);

// Design with covariate factor products precomputed per observation; the hot
// path used by the estimating functions.
class CompiledDesign {
 public:
  CompiledDesign() = default;
  CompiledDesign(const DesignSpec& spec, const MatrixXd& l);

  Index n_cols() const { return cols_; }
  void row_real(Index i, const double* a, double* out) const;
  void row_complex(Index i, const Cplx* a, Cplx* out) const;

 private:
  Index cols_ = 0;
  bool intercept_ = true;
  MatrixXd cov_part_;  // n x terms
  std::vector<std::vector<std::pair<Index, int>>> expo_;
};

// ---- normal propensity models -------------------------------------------------

struct PropensityComponent {
  DesignSpec mean_design;  // covariate-only
  VectorXd zeta;           // conditional mean coefficients
  double delta2 = 1.0;     // conditional variance after error correction
  double mu = 0.0;         // marginal mean
  double tau2 = 1.0;       // marginal variance after error correction
};

struct PropensityModel {
  std::vector<PropensityComponent> components;
};

// Least-squares / moment fit of per-exposure normal propensity models from the
// measured exposures. The conditional and marginal variances subtract the
// corresponding diagonal of Sigma_me, since Var(A*|L) = Var(A|L) + sigma2_me
// under classical additive error. Throws InfeasibleVarianceError when a
// corrected variance is not positive.
PropensityModel fit_propensity(const Dataset& data, const std::vector<DesignSpec>& designs,
                               const MatrixXd& sigma_me);

// Same fit on an explicit exposure matrix (oracle fits, weighted two-phase).
PropensityModel fit_propensity_matrix(const MatrixXd& exposures, const MatrixXd& l,
                                      const double* weights,
                                      const std::vector<DesignSpec>& designs,
                                      const VectorXd& sigma_diag);

// log(delta/tau) and the quadratic exponent coefficients of the normal density
// ratio f_A(a) / f_{A|L}(a | L) = (delta/tau) exp(b1 a^2 + b2 a + b3).
struct SwTerms {
  double b1;
  double b2;
  double b3;
  double log_ratio;
};

SwTerms sw_terms(double mu_l, double delta2, double mu, double tau2);

// Stabilized weight: product over exposures of marginal/conditional normal
// density ratios, evaluated at real exposure values.
double stabilized_weight(const PropensityModel& ps, const VectorXd& l_row, const VectorXd& a_row);

}  // namespace csme
