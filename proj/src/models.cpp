#include "csme/models.hpp"

#include <cmath>

namespace csme {

namespace {

double pow_int(double x, int p) {
  double out = 1.0;
  for (int k = 0; k < p; ++k) out *= x;
  return out;
}

double term_real(const Term& term, const VectorXd& l_row, const double* a_row) {
  double v = 1.0;
  for (const auto& f : term.factors)
    v *= pow_int(f.is_exposure ? a_row[f.index] : l_row(f.index), f.power);
  return v;
}

// Complex path mirrors the real one so a zero imaginary part reproduces the
// real evaluation bit for bit.
Cplx term_complex(const Term& term, const VectorXd& l_row, const Cplx* a_row) {
  Cplx v{1.0, 0.0};
  for (const auto& f : term.factors) {
    if (f.is_exposure)
      v = v * cpow_int(a_row[f.index], f.power);
    else
      v = v * pow_int(l_row(f.index), f.power);
  }
  return v;
}

}  // namespace

bool DesignSpec::has_exposure_covariate_interaction() const {
  for (const auto& t : terms) {
    bool has_e = false, has_c = false;
    for (const auto& f : t.factors) (f.is_exposure ? has_e : has_c) = true;
    if (has_e && has_c) return true;
  }
  return false;
}

void validate_design(const DesignSpec& spec, Index n_covariates, Index n_exposures,
                     bool allow_covariates, bool allow_exposures, const std::string& what) {
  for (const auto& t : spec.terms) {
    if (t.factors.empty()) throw SpecificationError(what + ": empty term (use the intercept flag)");
    for (const auto& f : t.factors) {
      if (f.power < 1) throw SpecificationError(what + ": factor powers must be >= 1");
      if (f.is_exposure) {
        if (!allow_exposures) throw SpecificationError(what + ": exposure terms are not allowed");
        if (f.index < 0 || f.index >= n_exposures)
          throw SpecificationError(what + ": exposure index out of range");
      } else {
        if (!allow_covariates) throw SpecificationError(what + ": covariate terms are not allowed");
        if (f.index < 0 || f.index >= n_covariates)
          throw SpecificationError(what + ": covariate index out of range");
      }
    }
  }
}

double inv_link(double lp, Link link) {
  switch (link) {
    case Link::identity:
      return lp;
    case Link::log_link:
      if (std::abs(lp) > kExpGuard)
        throw OverflowError("linear predictor " + std::to_string(lp) + " overflows log link");
      return std::exp(lp);
    case Link::logit:
      if (std::abs(lp) > kExpGuard)
        throw OverflowError("linear predictor " + std::to_string(lp) + " overflows logit link");
      return 1.0 / (1.0 + std::exp(-lp));
  }
  return lp;
}

double inv_link_derivative(double lp, Link link) {
  switch (link) {
    case Link::identity:
      return 1.0;
    case Link::log_link:
      return inv_link(lp, Link::log_link);
    case Link::logit: {
      const double p = inv_link(lp, Link::logit);
      return p * (1.0 - p);
    }
  }
  return 1.0;
}

double evaluate_mean(const DesignSpec& design, Link link, const VectorXd& beta,
                     const VectorXd& l_row, const VectorXd& a_row) {
  if (beta.size() != design.n_cols())
    throw DimensionError("coefficient length does not match design columns");
  Index c = 0;
  double lp = 0.0;
  if (design.intercept) lp += beta(c++);
  for (const auto& t : design.terms) lp += beta(c++) * term_real(t, l_row, a_row.data());
  return inv_link(lp, link);
}

Cplx evaluate_mean(const DesignSpec& design, Link link, const VectorXd& beta,
                   const VectorXd& l_row, const Cplx* a_row) {
  if (beta.size() != design.n_cols())
    throw DimensionError("coefficient length does not match design columns");
  Index c = 0;
  Cplx lp{0.0, 0.0};
  if (design.intercept) lp += Cplx{beta(c++), 0.0};
  for (const auto& t : design.terms) lp += beta(c++) * term_complex(t, l_row, a_row);
  return complex_link(lp, link);
}

VectorXd mean_gradient(const DesignSpec& design, Link link, const VectorXd& beta,
                       const VectorXd& l_row, const VectorXd& a_row) {
  Index c = 0;
  double lp = 0.0;
  VectorXd cols(design.n_cols());
  if (design.intercept) cols(c++) = 1.0;
  for (const auto& t : design.terms) cols(c++) = term_real(t, l_row, a_row.data());
  lp = cols.dot(beta);
  return inv_link_derivative(lp, link) * cols;
}

void mean_gradient(const DesignSpec& design, Link link, const VectorXd& beta,
                   const VectorXd& l_row, const Cplx* a_row, Cplx* out) {
  Index c = 0;
  if (design.intercept) out[c++] = {1.0, 0.0};
  for (const auto& t : design.terms) out[c++] = term_complex(t, l_row, a_row);
  Cplx lp{0.0, 0.0};
  for (Index k = 0; k < design.n_cols(); ++k) lp += beta(k) * out[k];
  const Cplx d = complex_link_derivative(lp, link);
  for (Index k = 0; k < design.n_cols(); ++k) out[k] = d * out[k];
}

CompiledDesign::CompiledDesign(const DesignSpec& spec, const MatrixXd& l)
    : cols_(spec.n_cols()), intercept_(spec.intercept) {
  const Index n = l.rows();
  const Index t = static_cast<Index>(spec.terms.size());
  cov_part_.resize(n, t);
  expo_.resize(static_cast<std::size_t>(t));
  for (Index k = 0; k < t; ++k) {
    const Term& term = spec.terms[static_cast<std::size_t>(k)];
    for (const auto& f : term.factors)
      if (f.is_exposure) expo_[static_cast<std::size_t>(k)].push_back({f.index, f.power});
    for (Index i = 0; i < n; ++i) {
      double v = 1.0;
      for (const auto& f : term.factors)
        if (!f.is_exposure) v *= pow_int(l(i, f.index), f.power);
      cov_part_(i, k) = v;
    }
  }
}

void CompiledDesign::row_real(Index i, const double* a, double* out) const {
  Index c = 0;
  if (intercept_) out[c++] = 1.0;
  for (Index k = 0; k < cov_part_.cols(); ++k) {
    double v = 1.0;
    for (const auto& [e, p] : expo_[static_cast<std::size_t>(k)]) v *= pow_int(a[e], p);
    out[c++] = cov_part_(i, k) * v;
  }
}

void CompiledDesign::row_complex(Index i, const Cplx* a, Cplx* out) const {
  Index c = 0;
  if (intercept_) out[c++] = {1.0, 0.0};
  for (Index k = 0; k < cov_part_.cols(); ++k) {
    Cplx v{1.0, 0.0};
    for (const auto& [e, p] : expo_[static_cast<std::size_t>(k)]) v = v * cpow_int(a[e], p);
    out[c++] = cov_part_(i, k) * v;
  }
}

PropensityModel fit_propensity(const Dataset& data, const std::vector<DesignSpec>& designs,
                               const MatrixXd& sigma_me) {
  VectorXd sigma_diag = VectorXd::Zero(data.n_exposures());
  if (sigma_me.size() > 0) {
    if (sigma_me.rows() != data.n_exposures() || sigma_me.cols() != data.n_exposures())
      throw DimensionError("Sigma_me shape does not match exposure count");
    sigma_diag = sigma_me.diagonal();
  }
  return fit_propensity_matrix(data.a_star(), data.l(), data.weight_data(), designs, sigma_diag);
}

PropensityModel fit_propensity_matrix(const MatrixXd& exposures, const MatrixXd& l,
                                      const double* weights,
                                      const std::vector<DesignSpec>& designs,
                                      const VectorXd& sigma_diag) {
  const Index n = exposures.rows();
  const Index m = exposures.cols();
  if (static_cast<Index>(designs.size()) != m)
    throw DimensionError("one propensity mean design per exposure required");

  PropensityModel out;
  for (Index j = 0; j < m; ++j) {
    const DesignSpec& spec = designs[static_cast<std::size_t>(j)];
    validate_design(spec, l.cols(), m, true, false, "propensity mean design");
    CompiledDesign cd(spec, l);
    const Index c = cd.n_cols();

    MatrixXd x(n, c);
    std::vector<double> row(static_cast<std::size_t>(c));
    for (Index i = 0; i < n; ++i) {
      cd.row_real(i, nullptr, row.data());
      for (Index k = 0; k < c; ++k) x(i, k) = row[static_cast<std::size_t>(k)];
    }

    VectorXd w = weights ? VectorXd(Eigen::Map<const VectorXd>(weights, n)) : VectorXd(VectorXd::Ones(n));
    const double wsum = w.sum();
    const MatrixXd xw = x.array().colwise() * w.array();
    const MatrixXd xtx = xw.transpose() * x;
    const VectorXd xta = xw.transpose() * exposures.col(j);
    Eigen::FullPivLU<MatrixXd> lu(xtx);
    if (!lu.isInvertible())
      throw CollinearityError("propensity design is collinear for exposure " + std::to_string(j));
    PropensityComponent comp;
    comp.mean_design = spec;
    comp.zeta = lu.solve(xta);

    const VectorXd resid = exposures.col(j) - x * comp.zeta;
    const double raw_cond_var = (w.array() * resid.array().square()).sum() / wsum;
    comp.delta2 = raw_cond_var - sigma_diag(j);
    if (!(comp.delta2 > 0.0))
      throw InfeasibleVarianceError(
          "assumed measurement error variance exceeds residual variance for exposure " +
          std::to_string(j) + " (corrected conditional variance " + std::to_string(comp.delta2) +
          ")");

    comp.mu = (w.array() * exposures.col(j).array()).sum() / wsum;
    const double raw_marg_var =
        (w.array() * (exposures.col(j).array() - comp.mu).square()).sum() / wsum;
    comp.tau2 = raw_marg_var - sigma_diag(j);
    if (!(comp.tau2 > 0.0))
      throw InfeasibleVarianceError(
          "assumed measurement error variance exceeds marginal variance for exposure " +
          std::to_string(j));
    out.components.push_back(std::move(comp));
  }
  return out;
}

SwTerms sw_terms(double mu_l, double delta2, double mu, double tau2) {
  SwTerms t;
  t.b1 = 0.5 * (1.0 / delta2 - 1.0 / tau2);
  t.b2 = mu / tau2 - mu_l / delta2;
  t.b3 = 0.5 * (mu_l * mu_l / delta2 - mu * mu / tau2);
  t.log_ratio = 0.5 * (std::log(delta2) - std::log(tau2));
  return t;
}

double stabilized_weight(const PropensityModel& ps, const VectorXd& l_row, const VectorXd& a_row) {
  double expo = 0.0;
  for (std::size_t j = 0; j < ps.components.size(); ++j) {
    const auto& comp = ps.components[j];
    std::vector<double> cols(static_cast<std::size_t>(comp.mean_design.n_cols()));
    Index c = 0;
    if (comp.mean_design.intercept) cols[static_cast<std::size_t>(c++)] = 1.0;
    for (const auto& t : comp.mean_design.terms)
      cols[static_cast<std::size_t>(c++)] = term_real(t, l_row, nullptr);
    double mu_l = 0.0;
    for (Index k = 0; k < comp.mean_design.n_cols(); ++k)
      mu_l += comp.zeta(k) * cols[static_cast<std::size_t>(k)];
    const SwTerms t = sw_terms(mu_l, comp.delta2, comp.mu, comp.tau2);
    const double a = a_row(static_cast<Index>(j));
    expo += t.log_ratio + t.b1 * a * a + t.b2 * a + t.b3;
  }
  return std::exp(expo);
}

}  // namespace csme
