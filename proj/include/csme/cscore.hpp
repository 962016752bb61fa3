#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "csme/core_data.hpp"
#include "csme/cplx.hpp"
#include "csme/mestim.hpp"

namespace csme {

enum class Link { identity, log_link, logit };

// Inverse link applied to a complex linear predictor. log and logit guard the
// real part of the exponent at |Re| > 700.
Cplx complex_link(const Cplx& z, Link link, Index observation = -1);

// Derivative of the inverse link at a complex linear predictor.
Cplx complex_link_derivative(const Cplx& z, Link link, Index observation = -1);

// Frozen bank of simulated imaginary measurement errors: eps[i][b] is an m-
// vector, drawn as F u with u standard normal from a counter-keyed stream so
// the bank is reproducible bit-for-bit for fixed (seed, n, B, Sigma_me). With
// antithetic pairing, odd replicates are the negated even ones.
class PerturbationBank {
 public:
  PerturbationBank(Index n, Index b, Index m, std::uint64_t seed, bool antithetic)
      : n_(n), b_(b), m_(m), seed_(seed), antithetic_(antithetic),
        eps_(static_cast<std::size_t>(n * b * m), 0.0) {}

  Index n() const { return n_; }
  Index replicates() const { return b_; }
  Index n_exposures() const { return m_; }
  std::uint64_t seed() const { return seed_; }
  bool antithetic() const { return antithetic_; }
  bool all_zero() const { return all_zero_; }

  const double* draw(Index i, Index b) const {
    return eps_.data() + static_cast<std::size_t>((i * b_ + b) * m_);
  }
  double* mutable_draw(Index i, Index b) {
    return eps_.data() + static_cast<std::size_t>((i * b_ + b) * m_);
  }
  void set_all_zero(bool v) { all_zero_ = v; }

 private:
  Index n_, b_, m_;
  std::uint64_t seed_;
  bool antithetic_;
  bool all_zero_ = true;
  std::vector<double> eps_;
};

PerturbationBank draw_perturbations(Index n, Index b, const MeCovariance& sigma,
                                    std::uint64_t seed, bool antithetic = true);

// A score psi0(Y_i, L_i, a; theta) that accepts complex exposure values.
// Implementations must be pure so evaluations can run concurrently.
class ComplexScore {
 public:
  virtual ~ComplexScore() = default;
  virtual Index dim() const = 0;
  virtual Index n_obs() const = 0;
  virtual void eval(Index i, std::span<const Cplx> exposure, const VectorXd& theta,
                    std::span<Cplx> out) const = 0;
};

// Monte-Carlo corrected score: psi(i, theta) = B^{-1} sum_b Re{psi0(i, a*_i + i eps_ib, theta)}.
// With a null bank (or an all-zero bank) this evaluates psi0 once at the real
// exposures, which is also how oracle/naive scores are realized.
class MccsFunction final : public EstimatingFunction {
 public:
  MccsFunction(const ComplexScore& psi0, const MatrixXd& exposures, const PerturbationBank* bank);

  Index dim() const override { return psi0_->dim(); }
  Index n_obs() const override { return exposures_->rows(); }
  void eval(Index i, const VectorXd& theta, double* out) const override;

 private:
  const ComplexScore* psi0_;
  const MatrixXd* exposures_;
  const PerturbationBank* bank_;
};

MccsFunction mccs_transform(const ComplexScore& psi0, const MatrixXd& measured_exposures,
                            const PerturbationBank& bank);

// Scalar normal propensity parameters for the closed-form corrected IPW score:
// A | L ~ N(mu_l, delta2) and A ~ N(mu, tau2), both variances positive.
struct NormalPropensityScalar {
  double mu_l;
  double delta2;
  double mu;
  double tau2;
};

// Closed-form corrected score for the univariate normal-propensity, identity-
// link MSM case: the expectation over the imaginary perturbation is evaluated
// analytically through the Gaussian characteristic function. Throws
// DivergentCorrectionError when the defining integral does not exist.
Eigen::Vector2d closed_form_cs_ipw(double y, double a_star, double sigma2_me,
                                   const NormalPropensityScalar& ps, double gamma0, double gamma1);

}  // namespace csme
