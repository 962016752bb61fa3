#include "csme/cscore.hpp"

#include <omp.h>

#include <cmath>

#include "csme/rng.hpp"

namespace csme {

Cplx complex_link(const Cplx& z, Link link, Index observation) {
  switch (link) {
    case Link::identity:
      return z;
    case Link::log_link:
      check_exp_argument(z, observation);
      return cexp(z);
    case Link::logit: {
      check_exp_argument(z, observation);
      const Cplx e = cexp(Cplx{-z.re, -z.im});
      return Cplx{1.0, 0.0} / (Cplx{1.0, 0.0} + e);
    }
  }
  return z;
}

Cplx complex_link_derivative(const Cplx& z, Link link, Index observation) {
  switch (link) {
    case Link::identity:
      return {1.0, 0.0};
    case Link::log_link:
      check_exp_argument(z, observation);
      return cexp(z);
    case Link::logit: {
      const Cplx p = complex_link(z, Link::logit, observation);
      return p * (Cplx{1.0, 0.0} - p);
    }
  }
  return {1.0, 0.0};
}

PerturbationBank draw_perturbations(Index n, Index b, const MeCovariance& sigma,
                                    std::uint64_t seed, bool antithetic) {
  if (n < 1 || b < 1) throw ArgumentError("perturbation bank requires n >= 1 and B >= 1");
  const Index m = sigma.dim();
  const Index r = sigma.rank();
  PerturbationBank bank(n, b, m, seed, antithetic);
  if (r == 0) return bank;  // error-free exposures: perturbations stay exactly zero
  bank.set_all_zero(false);

  const MatrixXd& f = sigma.factor;
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    std::vector<double> u(static_cast<std::size_t>(r));
    for (Index k = 0; k < b; ++k) {
      double* out = bank.mutable_draw(i, k);
      if (antithetic && (k % 2 == 1)) {
        const double* prev = bank.draw(i, k - 1);
        for (Index j = 0; j < m; ++j) out[j] = -prev[j];
        continue;
      }
      // Keyed by (seed, i, draw index) so the bank is order-independent.
      Rng rng(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(k));
      for (Index c = 0; c < r; ++c) u[static_cast<std::size_t>(c)] = rng.normal();
      for (Index j = 0; j < m; ++j) {
        double acc = 0.0;
        for (Index c = 0; c < r; ++c) acc += f(j, c) * u[static_cast<std::size_t>(c)];
        out[j] = acc;
      }
    }
  }
  return bank;
}

MccsFunction::MccsFunction(const ComplexScore& psi0, const MatrixXd& exposures,
                           const PerturbationBank* bank)
    : psi0_(&psi0), exposures_(&exposures), bank_(bank) {
  if (bank_) {
    if (bank_->n() != exposures.rows() || bank_->n_exposures() != exposures.cols())
      throw DimensionError("perturbation bank shape does not match exposure matrix");
  }
  if (psi0.n_obs() != exposures.rows())
    throw DimensionError("score and exposure matrix disagree on n");
}

void MccsFunction::eval(Index i, const VectorXd& theta, double* out) const {
  const Index m = exposures_->cols();
  const Index q = psi0_->dim();
  thread_local std::vector<Cplx> abuf;
  thread_local std::vector<Cplx> vbuf;
  abuf.resize(static_cast<std::size_t>(m));
  vbuf.resize(static_cast<std::size_t>(q));

  if (!bank_ || bank_->all_zero()) {
    for (Index j = 0; j < m; ++j) abuf[static_cast<std::size_t>(j)] = {(*exposures_)(i, j), 0.0};
    psi0_->eval(i, {abuf.data(), abuf.size()}, theta, {vbuf.data(), vbuf.size()});
    for (Index r = 0; r < q; ++r) out[r] = vbuf[static_cast<std::size_t>(r)].re;
    return;
  }

  const Index nb = bank_->replicates();
  for (Index r = 0; r < q; ++r) out[r] = 0.0;
  for (Index b = 0; b < nb; ++b) {
    const double* eps = bank_->draw(i, b);
    for (Index j = 0; j < m; ++j) abuf[static_cast<std::size_t>(j)] = {(*exposures_)(i, j), eps[j]};
    psi0_->eval(i, {abuf.data(), abuf.size()}, theta, {vbuf.data(), vbuf.size()});
    for (Index r = 0; r < q; ++r) out[r] += vbuf[static_cast<std::size_t>(r)].re;
  }
  const double inv_b = 1.0 / static_cast<double>(nb);
  for (Index r = 0; r < q; ++r) out[r] *= inv_b;
}

MccsFunction mccs_transform(const ComplexScore& psi0, const MatrixXd& measured_exposures,
                            const PerturbationBank& bank) {
  return MccsFunction(psi0, measured_exposures, &bank);
}

// Derivation sketch: with SW(a) = (delta/tau) exp(b1 a^2 + b2 a + b3) and
// a = a* + i*e, the score factors into exp(c1 - c2 e^2 + i c3 e) times a
// polynomial in e. Averaging over e ~ N(0, s) uses
//   E[exp(-c2 e^2 + i c3 e)]        = (1 + 2 s c2)^{-1/2} exp(-c3^2 / (2 D)),
//   E[e sin(c3 e) exp(-c2 e^2)]     = M c3 / D,
//   E[e^2 cos(c3 e) exp(-c2 e^2)]   = (M / D)(1 - c3^2 / D),
// where D = 1/s + 2 c2 and M is the first expectation. The integrals exist iff
// 1 + 2 s c2 > 0. Certified against the Monte-Carlo corrected score in tests.
Eigen::Vector2d closed_form_cs_ipw(double y, double a_star, double sigma2_me,
                                   const NormalPropensityScalar& ps, double gamma0,
                                   double gamma1) {
  if (!(ps.delta2 > 0.0) || !(ps.tau2 > 0.0))
    throw ArgumentError("propensity variances must be positive");
  if (sigma2_me < 0.0) throw ArgumentError("measurement error variance must be nonnegative");

  const double b1 = 0.5 * (1.0 / ps.delta2 - 1.0 / ps.tau2);
  const double b2 = ps.mu / ps.tau2 - ps.mu_l / ps.delta2;
  const double b3 = 0.5 * (ps.mu_l * ps.mu_l / ps.delta2 - ps.mu * ps.mu / ps.tau2);
  const double ratio = std::sqrt(ps.delta2 / ps.tau2);

  const double c1 = b1 * a_star * a_star + b2 * a_star + b3;
  const double c2 = b1;
  const double c3 = 2.0 * b1 * a_star + b2;
  const double d1 = y - gamma0 - gamma1 * a_star;
  const double d2 = gamma1;
  const double d3 = d1 * a_star;
  const double d4 = gamma1;
  const double d5 = y - gamma0 - 2.0 * gamma1 * a_star;

  if (sigma2_me == 0.0) {
    const double w = ratio * std::exp(c1);
    return {w * d1, w * d3};
  }

  const double one_plus = 1.0 + 2.0 * sigma2_me * c2;
  if (!(one_plus > 0.0))
    throw DivergentCorrectionError(
        "corrected-score integral does not exist: 1 + 2*sigma2_me*c2 = " +
        std::to_string(one_plus));

  const double big_d = 1.0 / sigma2_me + 2.0 * c2;
  const double prefactor =
      ratio / std::sqrt(one_plus) * std::exp(c1 - c3 * c3 / (2.0 * big_d));
  const double psi1 = prefactor * (d1 + d2 * c3 / big_d);
  const double psi2 =
      prefactor * (d3 - d5 * c3 / big_d + d4 / big_d * (1.0 - c3 * c3 / big_d));
  return {psi1, psi2};
}

}  // namespace csme
