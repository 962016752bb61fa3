#include "csme/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "csme/rng.hpp"

namespace csme {

std::string method_name(Method m) {
  switch (m) {
    case Method::gformula: return "gformula";
    case Method::ipw: return "ipw";
    case Method::dr: return "dr";
  }
  return "?";
}

std::string correction_name(Correction c) {
  switch (c) {
    case Correction::oracle: return "oracle";
    case Correction::naive: return "naive";
    case Correction::cs: return "cs";
    case Correction::rc: return "rc";
    case Correction::simex: return "simex";
  }
  return "?";
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---- stacked estimating function -------------------------------------------------

class StackedScore final : public EstimatingFunction {
 public:
  explicit StackedScore(Index n) : n_(n) {}

  void add(std::unique_ptr<EstimatingFunction> fn,
           std::vector<std::pair<Index, Index>> param_deps) {
    StackStructure::Component c;
    c.row_begin = rows_;
    c.row_end = rows_ + fn->dim();
    c.param_ranges = std::move(param_deps);
    structure_.components.push_back(c);
    rows_ = c.row_end;
    comps_.push_back(std::move(fn));
  }

  Index dim() const override { return rows_; }
  Index n_obs() const override { return n_; }

  void eval(Index i, const VectorXd& theta, double* out) const override {
    for (std::size_t k = 0; k < comps_.size(); ++k)
      comps_[k]->eval(i, theta, out + structure_.components[k].row_begin);
  }

  void eval_rows(Index i, const VectorXd& theta, Index row_begin, Index row_end,
                 double* out) const override {
    for (std::size_t k = 0; k < comps_.size(); ++k) {
      const auto& c = structure_.components[k];
      if (c.row_end <= row_begin || c.row_begin >= row_end) continue;
      comps_[k]->eval(i, theta, out + (c.row_begin - row_begin));
    }
  }

  const StackStructure& structure() const { return structure_; }

 private:
  Index n_;
  Index rows_ = 0;
  std::vector<std::unique_ptr<EstimatingFunction>> comps_;
  StackStructure structure_;
};

// ---- propensity parameter layout -------------------------------------------------

struct PsLayout {
  struct Exposure {
    MatrixXd x;      // n x c compiled mean design
    Index zeta_off;  // start of [zeta, delta2, mu, tau2] in theta
    Index c;
  };
  std::vector<Exposure> exposures;
  Index param_begin = 0;
  Index param_end = 0;
};

// Combined stabilized-weight exponent over exposures at complex exposure
// values. Returns NaN for nonpositive trial variances so the solver backs off
// instead of evaluating an undefined density ratio.
Cplx sw_complex(const PsLayout& ps, Index i, const Cplx* a, const VectorXd& theta) {
  Cplx ex{0.0, 0.0};
  for (std::size_t j = 0; j < ps.exposures.size(); ++j) {
    const auto& e = ps.exposures[j];
    const double delta2 = theta(e.zeta_off + e.c);
    const double mu = theta(e.zeta_off + e.c + 1);
    const double tau2 = theta(e.zeta_off + e.c + 2);
    if (!(delta2 > 0.0) || !(tau2 > 0.0)) return {kNaN, kNaN};
    double mu_l = 0.0;
    for (Index k = 0; k < e.c; ++k) mu_l += e.x(i, k) * theta(e.zeta_off + k);
    const SwTerms t = sw_terms(mu_l, delta2, mu, tau2);
    const Cplx aj = a[j];
    ex += t.b1 * (aj * aj) + t.b2 * aj + Cplx{t.b3 + t.log_ratio, 0.0};
  }
  check_exp_argument(ex, i);
  return cexp(ex);
}

// Propensity moment equations for one exposure. Rows: c normal equations for
// the conditional mean, then conditional variance, marginal mean, marginal
// variance. The variance rows subtract sigma_jj so the solved parameters refer
// to the true exposure.
class PsEquations final : public EstimatingFunction {
 public:
  PsEquations(const PsLayout::Exposure* layout, VectorXd a, double sigma_jj)
      : layout_(layout), a_(std::move(a)), sigma_jj_(sigma_jj) {}

  Index dim() const override { return layout_->c + 3; }
  Index n_obs() const override { return a_.size(); }

  void eval(Index i, const VectorXd& theta, double* out) const override {
    const Index c = layout_->c;
    double mean = 0.0;
    for (Index k = 0; k < c; ++k) mean += layout_->x(i, k) * theta(layout_->zeta_off + k);
    const double r = a_(i) - mean;
    for (Index k = 0; k < c; ++k) out[k] = r * layout_->x(i, k);
    const double delta2 = theta(layout_->zeta_off + c);
    const double mu = theta(layout_->zeta_off + c + 1);
    const double tau2 = theta(layout_->zeta_off + c + 2);
    out[c] = r * r - delta2 - sigma_jj_;
    out[c + 1] = a_(i) - mu;
    out[c + 2] = (a_(i) - mu) * (a_(i) - mu) - tau2 - sigma_jj_;
  }

 private:
  const PsLayout::Exposure* layout_;
  VectorXd a_;
  double sigma_jj_;
};

// Residual-times-gradient score of a mean model, {y - g^{-1}(x'b)} (g^{-1})'(x'b) x,
// optionally multiplied by a stabilized weight read off the propensity
// parameters in theta or from a fixed known vector.
class ResidualScore final : public ComplexScore {
 public:
  enum class Weighting { none, from_theta, known };

  ResidualScore(const VectorXd* y, CompiledDesign design, Link link, Index coef_off,
                Weighting wmode, const PsLayout* ps, const VectorXd* known_w)
      : y_(y), design_(std::move(design)), link_(link), coef_off_(coef_off), wmode_(wmode),
        ps_(ps), known_w_(known_w) {}

  Index dim() const override { return design_.n_cols(); }
  Index n_obs() const override { return y_->size(); }

  void eval(Index i, std::span<const Cplx> a, const VectorXd& theta,
            std::span<Cplx> out) const override {
    const Index p = design_.n_cols();
    design_.row_complex(i, a.data(), out.data());
    Cplx lp{0.0, 0.0};
    for (Index k = 0; k < p; ++k) lp += theta(coef_off_ + k) * out[static_cast<std::size_t>(k)];
    const Cplx mu = complex_link(lp, link_, i);
    Cplx gp{1.0, 0.0};
    if (link_ == Link::log_link)
      gp = mu;
    else if (link_ == Link::logit)
      gp = mu * (Cplx{1.0, 0.0} - mu);
    Cplx scale = (Cplx{(*y_)(i), 0.0} - mu) * gp;
    if (wmode_ == Weighting::from_theta)
      scale = scale * sw_complex(*ps_, i, a.data(), theta);
    else if (wmode_ == Weighting::known)
      scale = scale * (known_w_ ? (*known_w_)(i) : 1.0);
    for (Index k = 0; k < p; ++k)
      out[static_cast<std::size_t>(k)] = scale * out[static_cast<std::size_t>(k)];
  }

 private:
  const VectorXd* y_;
  CompiledDesign design_;
  Link link_;
  Index coef_off_;
  Weighting wmode_;
  const PsLayout* ps_;
  const VectorXd* known_w_;
};

// Standardization rows: eta(a_g) - g^{-1}(d_g(L_i)' beta), one per grid point.
// The grid exposures are fixed real values, so no correction applies here.
class StandardizationRows final : public EstimatingFunction {
 public:
  StandardizationRows(std::vector<MatrixXd> dmats, Link link, Index beta_off, Index eta_off)
      : dmats_(std::move(dmats)), link_(link), beta_off_(beta_off), eta_off_(eta_off) {}

  Index dim() const override { return static_cast<Index>(dmats_.size()); }
  Index n_obs() const override { return dmats_.empty() ? 0 : dmats_.front().rows(); }

  void eval(Index i, const VectorXd& theta, double* out) const override {
    for (std::size_t g = 0; g < dmats_.size(); ++g) {
      const MatrixXd& d = dmats_[g];
      double lp = 0.0;
      for (Index k = 0; k < d.cols(); ++k) lp += d(i, k) * theta(beta_off_ + k);
      out[g] = theta(eta_off_ + static_cast<Index>(g)) - inv_link(lp, link_);
    }
  }

 private:
  std::vector<MatrixXd> dmats_;
  Link link_;
  Index beta_off_;
  Index eta_off_;
};

// ---- assembly ---------------------------------------------------------------------

MatrixXd effective_sigma(const EstimatorRequest& req, Index m) {
  if (req.sigma_me.size() == 0) return MatrixXd::Zero(m, m);
  if (req.sigma_me.rows() != m || req.sigma_me.cols() != m)
    throw DimensionError("Sigma_me shape does not match the exposure count");
  return req.sigma_me;
}

// Everything referenced by the stacked score lives behind stable addresses
// here, so a BuiltFit can be moved safely.
struct BuiltFit {
  std::unique_ptr<StackedScore> stack;
  std::vector<std::unique_ptr<ComplexScore>> scores;
  std::unique_ptr<PerturbationBank> bank;
  std::unique_ptr<PsLayout> ps;
  std::unique_ptr<MatrixXd> fit_exposures;
  std::unique_ptr<VectorXd> known_w;
  ParameterBlocks blocks;
  VectorXd theta0;
  Index beta_off = -1, beta_len = 0;
  Index gamma_off = -1, gamma_len = 0;
  Index eta_off = -1, eta_len = 0;
};

const MatrixXd& exposure_matrix(const Dataset& data, Correction corr) {
  if (corr == Correction::oracle) {
    if (!data.has_true_exposures())
      throw ArgumentError("oracle correction requires true exposure values");
    return data.true_exposures();
  }
  return data.a_star();
}

// Builds the stacked system for oracle/naive/cs corrections. Parameter layout:
// [propensity params per exposure] [beta | gamma] [eta grid].
BuiltFit build_fit(const EstimatorRequest& req, const Dataset& data, Correction corr,
                   std::optional<double> cap_quantile) {
  const Index n = data.n();
  const Index m = data.n_exposures();
  const bool is_cs = corr == Correction::cs;
  const MatrixXd sigma = effective_sigma(req, m);

  BuiltFit b;
  b.fit_exposures = std::make_unique<MatrixXd>(exposure_matrix(data, corr));

  const bool wants_outcome = req.method != Method::ipw;
  const bool wants_msm = req.method == Method::ipw;
  const Index grid_n = req.method == Method::ipw ? 0 : req.dose_grid.rows();

  if (wants_outcome && !req.outcome)
    throw SpecificationError("g-formula and doubly robust estimators require an outcome model");
  if (req.method != Method::gformula && !req.msm)
    throw SpecificationError("ipw and doubly robust estimators require an MSM");
  if (req.method == Method::dr) {
    if (req.outcome->link != req.msm->link)
      throw SpecificationError("doubly robust estimation requires outcome and MSM on the same link");
    if (req.outcome->link == Link::logit)
      throw SpecificationError("doubly robust estimation supports identity or log links only");
    if (req.outcome->link == Link::log_link &&
        req.outcome->design.has_exposure_covariate_interaction())
      throw SpecificationError(
          "doubly robust estimation with a log link excludes exposure-covariate interactions");
  }
  const bool needs_ps_designs = req.method != Method::gformula && !req.known_sw;
  if (needs_ps_designs && static_cast<Index>(req.propensity_designs.size()) != m)
    throw SpecificationError("one propensity design per exposure is required");

  // Resolve known or capped weights before laying out parameters: a fit with
  // realized weights carries no propensity block.
  if (req.known_sw) {
    VectorXd w = req.known_sw_values ? *req.known_sw_values : VectorXd::Ones(n);
    if (w.size() != n) throw DimensionError("known SW length mismatch");
    b.known_w = std::make_unique<VectorXd>(std::move(w));
  } else if (cap_quantile && req.method != Method::gformula) {
    if (is_cs)
      throw SpecificationError("stabilized-weight capping applies to real-weight fits only");
    PropensityModel ps_fit =
        fit_propensity_matrix(*b.fit_exposures, data.l(), data.weight_data(),
                              req.propensity_designs, VectorXd::Zero(m));
    VectorXd w(n);
    for (Index i = 0; i < n; ++i)
      w(i) = stabilized_weight(ps_fit, data.l().row(i), b.fit_exposures->row(i));
    VectorXd sorted = w;
    std::sort(sorted.data(), sorted.data() + n);
    const Index pos =
        std::min<Index>(n - 1, static_cast<Index>(std::floor(*cap_quantile * (n - 1))));
    const double cap = sorted(pos);
    for (Index i = 0; i < n; ++i) w(i) = std::min(w(i), cap);
    b.known_w = std::make_unique<VectorXd>(std::move(w));
  }
  const bool use_known_w = b.known_w != nullptr;
  const bool wants_ps = req.method != Method::gformula && !use_known_w;

  // Parameter layout.
  std::vector<ParameterBlock> blocks;
  Index off = 0;
  b.ps = std::make_unique<PsLayout>();
  if (wants_ps) {
    b.ps->param_begin = off;
    for (Index j = 0; j < m; ++j) {
      const DesignSpec& spec = req.propensity_designs[static_cast<std::size_t>(j)];
      validate_design(spec, data.n_covariates(), m, true, false, "propensity mean design");
      PsLayout::Exposure e;
      CompiledDesign cd(spec, data.l());
      e.c = cd.n_cols();
      e.x.resize(n, e.c);
      std::vector<double> row(static_cast<std::size_t>(e.c));
      for (Index i = 0; i < n; ++i) {
        cd.row_real(i, nullptr, row.data());
        for (Index k = 0; k < e.c; ++k) e.x(i, k) = row[static_cast<std::size_t>(k)];
      }
      e.zeta_off = off;
      off += e.c + 3;
      b.ps->exposures.push_back(std::move(e));
    }
    b.ps->param_end = off;
    blocks.push_back({"ps", b.ps->param_begin, b.ps->param_end - b.ps->param_begin});
  }
  if (wants_outcome) {
    validate_design(req.outcome->design, data.n_covariates(), m, true, true, "outcome design");
    b.beta_off = off;
    b.beta_len = req.outcome->design.n_cols();
    off += b.beta_len;
    blocks.push_back({"beta", b.beta_off, b.beta_len});
  }
  if (wants_msm) {
    validate_design(req.msm->design, data.n_covariates(), m, false, true, "msm design");
    b.gamma_off = off;
    b.gamma_len = req.msm->design.n_cols();
    off += b.gamma_len;
    blocks.push_back({"gamma", b.gamma_off, b.gamma_len});
  }
  if (grid_n > 0) {
    if (req.dose_grid.cols() != m)
      throw DimensionError("dose grid width must match exposure count");
    b.eta_off = off;
    b.eta_len = grid_n;
    off += grid_n;
    blocks.push_back({"eta", b.eta_off, b.eta_len});
  }
  b.blocks = ParameterBlocks(std::move(blocks));
  b.theta0 = VectorXd::Zero(off);

  // Perturbation bank (cs only; an all-zero Sigma_me degenerates to the plain score).
  if (is_cs) {
    MeCovariance cov = factor_me_covariance(sigma);
    b.bank = std::make_unique<PerturbationBank>(draw_perturbations(
        n, std::max<Index>(1, req.mccs.replicates), cov, req.mccs.seed, req.mccs.antithetic));
  }

  // Components.
  b.stack = std::make_unique<StackedScore>(n);
  const VectorXd sigma_diag_fit =
      is_cs ? VectorXd(sigma.diagonal()) : VectorXd(VectorXd::Zero(m));

  if (wants_ps) {
    for (Index j = 0; j < m; ++j) {
      const auto& e = b.ps->exposures[static_cast<std::size_t>(j)];
      auto eq = std::make_unique<PsEquations>(&e, VectorXd(b.fit_exposures->col(j)),
                                              sigma_diag_fit(j));
      b.stack->add(std::move(eq), {{e.zeta_off, e.zeta_off + e.c + 3}});
    }
  }

  auto weighting = ResidualScore::Weighting::none;
  const PsLayout* ps_ptr = nullptr;
  const VectorXd* known_ptr = nullptr;
  if (req.method != Method::gformula) {
    if (use_known_w) {
      weighting = ResidualScore::Weighting::known;
      known_ptr = b.known_w.get();
    } else {
      weighting = ResidualScore::Weighting::from_theta;
      ps_ptr = b.ps.get();
    }
  }

  std::vector<std::pair<Index, Index>> score_deps;
  if (weighting == ResidualScore::Weighting::from_theta)
    score_deps.push_back({b.ps->param_begin, b.ps->param_end});

  if (wants_outcome) {
    auto score = std::make_unique<ResidualScore>(
        &data.y(), CompiledDesign(req.outcome->design, data.l()), req.outcome->link, b.beta_off,
        weighting, ps_ptr, known_ptr);
    auto deps = score_deps;
    deps.push_back({b.beta_off, b.beta_off + b.beta_len});
    b.stack->add(std::make_unique<MccsFunction>(*score, *b.fit_exposures, b.bank.get()),
                 std::move(deps));
    b.scores.push_back(std::move(score));
  }
  if (wants_msm) {
    auto score = std::make_unique<ResidualScore>(
        &data.y(), CompiledDesign(req.msm->design, data.l()), req.msm->link, b.gamma_off,
        weighting, ps_ptr, known_ptr);
    auto deps = score_deps;
    deps.push_back({b.gamma_off, b.gamma_off + b.gamma_len});
    b.stack->add(std::make_unique<MccsFunction>(*score, *b.fit_exposures, b.bank.get()),
                 std::move(deps));
    b.scores.push_back(std::move(score));
  }
  if (grid_n > 0) {
    CompiledDesign cd(req.outcome->design, data.l());
    std::vector<MatrixXd> dmats;
    std::vector<double> row(static_cast<std::size_t>(b.beta_len));
    for (Index g = 0; g < grid_n; ++g) {
      MatrixXd d(n, b.beta_len);
      const VectorXd a_g = req.dose_grid.row(g);
      for (Index i = 0; i < n; ++i) {
        cd.row_real(i, a_g.data(), row.data());
        for (Index k = 0; k < b.beta_len; ++k) d(i, k) = row[static_cast<std::size_t>(k)];
      }
      dmats.push_back(std::move(d));
    }
    b.stack->add(std::make_unique<StandardizationRows>(std::move(dmats), req.outcome->link,
                                                       b.beta_off, b.eta_off),
                 {{b.beta_off, b.beta_off + b.beta_len}, {b.eta_off, b.eta_off + b.eta_len}});
  }

  // Starting values: propensity parameters at their closed-form moment fits,
  // regression blocks at zero (replaced by the naive fit when seeding cs).
  if (wants_ps) {
    PropensityModel ps_fit = fit_propensity_matrix(*b.fit_exposures, data.l(), data.weight_data(),
                                                   req.propensity_designs, sigma_diag_fit);
    for (Index j = 0; j < m; ++j) {
      const auto& e = b.ps->exposures[static_cast<std::size_t>(j)];
      const auto& comp = ps_fit.components[static_cast<std::size_t>(j)];
      b.theta0.segment(e.zeta_off, e.c) = comp.zeta;
      b.theta0(e.zeta_off + e.c) = comp.delta2;
      b.theta0(e.zeta_off + e.c + 1) = comp.mu;
      b.theta0(e.zeta_off + e.c + 2) = comp.tau2;
    }
  }
  return b;
}

void copy_block_if_present(const FitResult& from, const ParameterBlocks& to_blocks, VectorXd& to,
                           const std::string& name) {
  if (!from.theta.blocks.has_block(name) || !to_blocks.has_block(name)) return;
  const auto& src = from.theta.blocks.block(name);
  const auto& dst = to_blocks.block(name);
  if (src.size != dst.size) return;
  to.segment(dst.offset, dst.size) = from.theta.values.segment(src.offset, src.size);
}

EstimationResult finalize(const EstimatorRequest& req, BuiltFit& b, FitResult fit) {
  EstimationResult out;
  out.fit = std::move(fit);

  if (b.eta_len > 0) {
    DoseResponse dose;
    dose.grid = req.dose_grid;
    dose.estimate = out.fit.theta.values.segment(b.eta_off, b.eta_len);
    dose.se_uc = VectorXd::Constant(b.eta_len, kNaN);
    dose.se_bc = VectorXd::Constant(b.eta_len, kNaN);
    for (Index g = 0; g < b.eta_len; ++g) {
      if (out.fit.vcov_uc) {
        dose.se_uc(g) =
            std::sqrt(std::max(0.0, (*out.fit.vcov_uc)(b.eta_off + g, b.eta_off + g)));
        dose.ci_uc.push_back(wald_ci(dose.estimate(g), dose.se_uc(g), req.alpha));
      } else {
        dose.ci_uc.push_back({kNaN, kNaN});
      }
      if (out.fit.vcov_bc) {
        dose.se_bc(g) =
            std::sqrt(std::max(0.0, (*out.fit.vcov_bc)(b.eta_off + g, b.eta_off + g)));
        dose.ci_bc.push_back(wald_ci(dose.estimate(g), dose.se_bc(g), req.alpha));
      } else {
        dose.ci_bc.push_back({kNaN, kNaN});
      }
    }
    out.dose = std::move(dose);

    for (const auto& [g1, g0] : req.contrasts) {
      if (g1 >= b.eta_len || g0 >= b.eta_len)
        throw ArgumentError("contrast grid index out of range");
      ContrastResult cr;
      cr.g1 = g1;
      cr.g0 = g0;
      const Index i1 = b.eta_off + g1, i0 = b.eta_off + g0;
      auto g = [i1, i0](const VectorXd& th) { return th(i1) - th(i0); };
      cr.estimate = out.fit.theta.values(i1) - out.fit.theta.values(i0);
      cr.se_uc = cr.se_bc = kNaN;
      cr.ci_uc = cr.ci_bc = {kNaN, kNaN};
      if (out.fit.vcov_uc) {
        auto d = delta_method(g, out.fit.theta.values, *out.fit.vcov_uc);
        cr.se_uc = d.se;
        cr.ci_uc = wald_ci(d.estimate, d.se, req.alpha);
      }
      if (out.fit.vcov_bc) {
        auto d = delta_method(g, out.fit.theta.values, *out.fit.vcov_bc);
        cr.se_bc = d.se;
        cr.ci_bc = wald_ci(d.estimate, d.se, req.alpha);
      }
      out.contrasts.push_back(cr);
    }
  }
  return out;
}

EstimationResult fit_oracle_naive_cs(const EstimatorRequest& req, const Dataset& data,
                                     ExecMode mode) {
  const Correction corr = req.correction;
  if (corr == Correction::oracle || corr == Correction::naive) {
    BuiltFit b = build_fit(req, data, corr, req.sw_cap_quantile);
    FitResult fit = fit_mestimator(*b.stack, data.weight_data(), b.blocks, b.theta0, req.solve,
                                   mode, &b.stack->structure());
    return finalize(req, b, std::move(fit));
  }

  // With an all-zero Sigma_me the perturbations vanish and no variance
  // correction applies: the corrected stack is the naive stack, so run the
  // identical solve path (the point estimates then agree bit for bit).
  const MatrixXd sigma = effective_sigma(req, data.n_exposures());
  if ((sigma.array() == 0.0).all()) {
    EstimatorRequest naive_req = req;
    naive_req.correction = Correction::naive;
    naive_req.sw_cap_quantile.reset();
    BuiltFit b0 = build_fit(naive_req, data, Correction::naive, std::nullopt);
    FitResult fit0 = fit_mestimator(*b0.stack, data.weight_data(), b0.blocks, b0.theta0,
                                    req.solve, mode, &b0.stack->structure());
    return finalize(req, b0, std::move(fit0));
  }

  // cs: seed the regression blocks from the naive fit.
  EstimatorRequest naive_req = req;
  naive_req.correction = Correction::naive;
  naive_req.sw_cap_quantile.reset();
  BuiltFit nb = build_fit(naive_req, data, Correction::naive, std::nullopt);
  FitResult naive_fit = solve(*nb.stack, data.weight_data(), nb.blocks, nb.theta0, req.solve,
                              mode, &nb.stack->structure());

  BuiltFit b = build_fit(req, data, Correction::cs, std::nullopt);
  copy_block_if_present(naive_fit, b.blocks, b.theta0, "beta");
  copy_block_if_present(naive_fit, b.blocks, b.theta0, "gamma");
  copy_block_if_present(naive_fit, b.blocks, b.theta0, "eta");
  FitResult fit = fit_mestimator(*b.stack, data.weight_data(), b.blocks, b.theta0, req.solve,
                                 mode, &b.stack->structure());
  return finalize(req, b, std::move(fit));
}

// Comparators report point estimates only; drop the variance matrices.
EstimationResult strip_variances(EstimationResult r) {
  r.fit.vcov_uc.reset();
  r.fit.vcov_bc.reset();
  if (r.dose) {
    r.dose->se_uc.setConstant(kNaN);
    r.dose->se_bc.setConstant(kNaN);
    for (auto& ci : r.dose->ci_uc) ci = {kNaN, kNaN};
    for (auto& ci : r.dose->ci_bc) ci = {kNaN, kNaN};
  }
  for (auto& c : r.contrasts) {
    c.se_uc = c.se_bc = kNaN;
    c.ci_uc = c.ci_bc = {kNaN, kNaN};
  }
  return r;
}

EstimationResult fit_rc(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  const MatrixXd imputed = rc_impute(data, effective_sigma(req, data.n_exposures()));
  Dataset data_rc = data.with_exposures(imputed);
  EstimatorRequest sub = req;
  sub.correction = Correction::naive;
  return strip_variances(fit_oracle_naive_cs(sub, data_rc, mode));
}

EstimationResult fit_simex(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  const VectorXd theta = simex_fit(req, data, mode);

  // Shape the extrapolated vector like the corresponding naive fit.
  EstimatorRequest sub = req;
  sub.correction = Correction::naive;
  BuiltFit b = build_fit(sub, data, Correction::naive, std::nullopt);
  FitResult fit;
  fit.theta.blocks = b.blocks;
  fit.theta.values = theta;
  fit.converged = true;
  return strip_variances(finalize(req, b, std::move(fit)));
}

}  // namespace

EstimationResult fit_gformula(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  if (req.method != Method::gformula) throw ArgumentError("request method is not gformula");
  return fit_estimator(req, data, mode);
}

EstimationResult fit_ipw(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  if (req.method != Method::ipw) throw ArgumentError("request method is not ipw");
  return fit_estimator(req, data, mode);
}

EstimationResult fit_dr(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  if (req.method != Method::dr) throw ArgumentError("request method is not dr");
  return fit_estimator(req, data, mode);
}

EstimationResult fit_estimator(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  switch (req.correction) {
    case Correction::oracle:
    case Correction::naive:
    case Correction::cs:
      return fit_oracle_naive_cs(req, data, mode);
    case Correction::rc:
      return fit_rc(req, data, mode);
    case Correction::simex:
      return fit_simex(req, data, mode);
  }
  throw ArgumentError("unknown correction");
}

MatrixXd rc_impute(const Dataset& data, const MatrixXd& sigma_me) {
  const Index n = data.n();
  const Index m = data.n_exposures();
  const Index p = data.n_covariates();
  if (n <= p + m + 1) throw ArgumentError("too few rows for moment-based imputation");
  if (sigma_me.rows() != m || sigma_me.cols() != m)
    throw DimensionError("Sigma_me shape does not match exposure count");

  const Eigen::RowVectorXd mean_a = data.a_star().colwise().mean();
  const Eigen::RowVectorXd mean_l =
      p > 0 ? Eigen::RowVectorXd(data.l().colwise().mean()) : Eigen::RowVectorXd(0);

  const MatrixXd ac = data.a_star().rowwise() - mean_a;
  const MatrixXd lc = p > 0 ? MatrixXd(data.l().rowwise() - mean_l) : MatrixXd(n, 0);
  const double denom = static_cast<double>(n - 1);

  const MatrixXd cov_astar = ac.transpose() * ac / denom;
  const MatrixXd cov_a = cov_astar - sigma_me;  // Cov(A) recovered from Cov(A*)
  const MatrixXd cov_la = p > 0 ? MatrixXd(lc.transpose() * ac / denom) : MatrixXd(0, m);
  const MatrixXd cov_ll = p > 0 ? MatrixXd(lc.transpose() * lc / denom) : MatrixXd(0, 0);

  MatrixXd top(m + p, m);
  top.topRows(m) = cov_a;
  if (p > 0) top.bottomRows(p) = cov_la;

  MatrixXd mid(m + p, m + p);
  mid.topLeftCorner(m, m) = cov_a + sigma_me;
  if (p > 0) {
    mid.topRightCorner(m, p) = cov_la.transpose();
    mid.bottomLeftCorner(p, m) = cov_la;
    mid.bottomRightCorner(p, p) = cov_ll;
  }

  Eigen::FullPivLU<MatrixXd> lu(mid);
  if (!lu.isInvertible()) throw CollinearityError("joint (A*, L) covariance block is singular");
  const MatrixXd coef = (lu.solve(top)).transpose();  // m x (m+p)

  MatrixXd out(n, m);
  for (Index i = 0; i < n; ++i) {
    VectorXd z(m + p);
    z.head(m) = ac.row(i).transpose();
    if (p > 0) z.tail(p) = lc.row(i).transpose();
    out.row(i) = mean_a + (coef * z).transpose();
  }
  return out;
}

VectorXd simex_fit(const EstimatorRequest& req, const Dataset& data, ExecMode mode) {
  if (req.method == Method::dr)
    throw SpecificationError("simex comparator supports gformula and ipw");
  const Index n = data.n();
  const Index m = data.n_exposures();
  const MeCovariance cov = factor_me_covariance(effective_sigma(req, m));

  EstimatorRequest base = req;
  base.correction = Correction::naive;

  BuiltFit b0 = build_fit(base, data, Correction::naive, std::nullopt);
  FitResult fit0 = solve(*b0.stack, data.weight_data(), b0.blocks, b0.theta0, req.solve, mode,
                         &b0.stack->structure());
  if (!fit0.converged) throw SimexError("simex base fit (lambda = 0) did not converge");

  const auto& lambdas = req.simex.lambda_grid;
  if (lambdas.empty()) throw ArgumentError("simex lambda grid is empty");
  const int nb = req.simex.replicates;
  const Index q = fit0.theta.values.size();

  MatrixXd theta_bar(q, static_cast<Index>(lambdas.size()));
  for (std::size_t li = 0; li < lambdas.size(); ++li) {
    const double lambda = lambdas[li];
    VectorXd acc = VectorXd::Zero(q);
    for (int rep = 0; rep < nb; ++rep) {
      MatrixXd noisy = data.a_star();
      if (!cov.is_zero()) {
        const double root = std::sqrt(lambda);
        VectorXd u(cov.rank());
        for (Index i = 0; i < n; ++i) {
          // Base noise keyed by (seed, rep, i) only, so the same draws are
          // rescaled across the lambda grid.
          Rng rng(req.simex.seed, static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(i));
          for (Index c = 0; c < cov.rank(); ++c) u(c) = rng.normal();
          noisy.row(i) += root * (cov.factor * u).transpose();
        }
      }
      Dataset data_l = data.with_exposures(std::move(noisy));
      BuiltFit bl = build_fit(base, data_l, Correction::naive, std::nullopt);
      FitResult fl = solve(*bl.stack, data_l.weight_data(), bl.blocks, bl.theta0, req.solve, mode,
                           &bl.stack->structure());
      if (!fl.converged)
        throw SimexError("simex refit failed at lambda = " + std::to_string(lambda) +
                         ", replicate " + std::to_string(rep));
      acc += fl.theta.values;
    }
    theta_bar.col(static_cast<Index>(li)) = acc / static_cast<double>(nb);
  }

  VectorXd out = simex_extrapolate(lambdas, fit0.theta.values, theta_bar);

  // For standardized estimators, recompute the dose-response coordinates from
  // the extrapolated coefficients instead of extrapolating them directly.
  if (req.method == Method::gformula && b0.eta_len > 0) {
    CompiledDesign cd(req.outcome->design, data.l());
    std::vector<double> row(static_cast<std::size_t>(b0.beta_len));
    const double* wptr = data.weight_data();
    for (Index g = 0; g < b0.eta_len; ++g) {
      const VectorXd a_g = req.dose_grid.row(g);
      double num = 0.0, den = 0.0;
      for (Index i = 0; i < n; ++i) {
        cd.row_real(i, a_g.data(), row.data());
        double lp = 0.0;
        for (Index k = 0; k < b0.beta_len; ++k)
          lp += row[static_cast<std::size_t>(k)] * out(b0.beta_off + k);
        const double w = wptr ? wptr[i] : 1.0;
        num += w * inv_link(lp, req.outcome->link);
        den += w;
      }
      out(b0.eta_off + g) = num / den;
    }
  }
  return out;
}

VectorXd simex_extrapolate(const std::vector<double>& lambdas, const VectorXd& v0,
                           const MatrixXd& v_bar) {
  if (lambdas.empty()) throw ArgumentError("simex lambda grid is empty");
  if (v_bar.rows() != v0.size() || v_bar.cols() != static_cast<Index>(lambdas.size()))
    throw DimensionError("extrapolation input shapes disagree");
  const Index npts = static_cast<Index>(lambdas.size()) + 1;
  MatrixXd v(npts, 3);
  v(0, 0) = 1.0;
  v(0, 1) = 0.0;
  v(0, 2) = 0.0;
  for (Index k = 1; k < npts; ++k) {
    const double lam = lambdas[static_cast<std::size_t>(k - 1)];
    v(k, 0) = 1.0;
    v(k, 1) = lam;
    v(k, 2) = lam * lam;
  }
  Eigen::LLT<MatrixXd> llt(v.transpose() * v);

  VectorXd out(v0.size());
  for (Index j = 0; j < v0.size(); ++j) {
    VectorXd yv(npts);
    yv(0) = v0(j);
    for (Index k = 1; k < npts; ++k) yv(k) = v_bar(j, k - 1);
    const VectorXd coef = llt.solve(v.transpose() * yv);
    out(j) = coef(0) - coef(1) + coef(2);  // the fitted quadratic at lambda = -1
  }
  return out;
}

MeCovariance estimate_me_covariance(const Dataset& data, bool diagonal_structure) {
  if (!data.has_replicate_group())
    throw ArgumentError("replicate groups are required to estimate Sigma_me");
  const Index m = data.n_exposures();
  const VectorXi& g = data.replicate_group();

  std::map<int, std::vector<Index>> groups;
  for (Index i = 0; i < data.n(); ++i) groups[g(i)].push_back(i);

  MatrixXd acc = MatrixXd::Zero(m, m);
  double denom = 0.0;
  for (const auto& [id, rows] : groups) {
    const Index k = static_cast<Index>(rows.size());
    if (k < 2) continue;
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(m);
    for (Index r : rows) mean += data.a_star().row(r);
    mean /= static_cast<double>(k);
    for (Index r : rows) {
      const Eigen::RowVectorXd d = data.a_star().row(r) - mean;
      acc += d.transpose() * d;
    }
    denom += static_cast<double>(k - 1);
  }
  if (denom <= 0.0)
    throw InsufficientReplicatesError("no subject has two or more replicate measurements");
  MatrixXd sigma = acc / denom;
  if (diagonal_structure) sigma = MatrixXd(sigma.diagonal().asDiagonal());
  return factor_me_covariance(sigma);
}

Dataset two_phase_weights(const Dataset& data, const std::vector<bool>& selected) {
  if (!data.has_case_indicator())
    throw ArgumentError("two-phase weights require a case indicator");
  if (static_cast<Index>(selected.size()) != data.n())
    throw DimensionError("selection indicator length mismatch");

  Index n_case = 0, n_ctrl = 0, s_case = 0, s_ctrl = 0;
  for (Index i = 0; i < data.n(); ++i) {
    const bool is_case = data.case_indicator()(i) == 1;
    (is_case ? n_case : n_ctrl) += 1;
    if (selected[static_cast<std::size_t>(i)]) (is_case ? s_case : s_ctrl) += 1;
  }
  if (n_case > 0 && s_case == 0)
    throw DegenerateStratumError("no cases selected into the second phase");
  if (n_ctrl > 0 && s_ctrl == 0)
    throw DegenerateStratumError("no non-cases selected into the second phase");

  const double p_case = n_case > 0 ? static_cast<double>(s_case) / n_case : 1.0;
  const double p_ctrl = n_ctrl > 0 ? static_cast<double>(s_ctrl) / n_ctrl : 1.0;

  std::vector<Index> rows;
  std::vector<double> w;
  for (Index i = 0; i < data.n(); ++i) {
    if (!selected[static_cast<std::size_t>(i)]) continue;
    rows.push_back(i);
    const double base = data.has_sample_weight() ? data.sample_weight()(i) : 1.0;
    const double p = data.case_indicator()(i) == 1 ? p_case : p_ctrl;
    w.push_back(base / p);
  }
  VectorXd weights = Eigen::Map<VectorXd>(w.data(), static_cast<Index>(w.size()));
  return data.subset(rows, weights);
}

std::vector<SensitivityCell> sensitivity_grid(const EstimatorRequest& req, const Dataset& data,
                                              const std::vector<MatrixXd>& sigma_grid,
                                              ExecMode mode) {
  if (sigma_grid.empty()) throw ArgumentError("sensitivity grid is empty");
  std::vector<SensitivityCell> out;
  for (const auto& sigma : sigma_grid) {
    SensitivityCell cell;
    cell.sigma_me = sigma;
    try {
      EstimatorRequest sub = req;
      sub.sigma_me = sigma;
      cell.result = fit_estimator(sub, data, mode);
      if (!cell.result->fit.converged) {
        cell.error = "fit did not converge";
        cell.result.reset();
      }
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    out.push_back(std::move(cell));
  }
  return out;
}

}  // namespace csme
