#include <doctest.h>

#include <cmath>

#include "csme/mestim.hpp"
#include "csme/rng.hpp"

using namespace csme;

namespace {

// Sample-mean equation: psi(i, theta) = y_i - theta.
class MeanScore : public EstimatingFunction {
 public:
  explicit MeanScore(VectorXd y) : y_(std::move(y)) {}
  Index dim() const override { return 1; }
  Index n_obs() const override { return y_.size(); }
  void eval(Index i, const VectorXd& theta, double* out) const override {
    out[0] = y_(i) - theta(0);
  }
  VectorXd y_;
};

// psi(i, theta) = theta - c for every observation.
class AffineScore : public EstimatingFunction {
 public:
  AffineScore(Index n, double c) : n_(n), c_(c) {}
  Index dim() const override { return 1; }
  Index n_obs() const override { return n_; }
  void eval(Index, const VectorXd& theta, double* out) const override { out[0] = theta(0) - c_; }
  Index n_;
  double c_;
};

class LogisticScore : public EstimatingFunction {
 public:
  LogisticScore(MatrixXd x, VectorXd y) : x_(std::move(x)), y_(std::move(y)) {}
  Index dim() const override { return x_.cols(); }
  Index n_obs() const override { return y_.size(); }
  void eval(Index i, const VectorXd& theta, double* out) const override {
    const double lp = x_.row(i).dot(theta);
    const double p = 1.0 / (1.0 + std::exp(-lp));
    for (Index k = 0; k < x_.cols(); ++k) out[k] = (y_(i) - p) * x_(i, k);
  }
  MatrixXd x_;
  VectorXd y_;
};

class OlsScore : public EstimatingFunction {
 public:
  OlsScore(MatrixXd x, VectorXd y) : x_(std::move(x)), y_(std::move(y)) {}
  Index dim() const override { return x_.cols(); }
  Index n_obs() const override { return y_.size(); }
  void eval(Index i, const VectorXd& theta, double* out) const override {
    const double r = y_(i) - x_.row(i).dot(theta);
    for (Index k = 0; k < x_.cols(); ++k) out[k] = r * x_(i, k);
  }
  MatrixXd x_;
  VectorXd y_;
};

class NanScore : public EstimatingFunction {
 public:
  Index dim() const override { return 1; }
  Index n_obs() const override { return 3; }
  void eval(Index, const VectorXd&, double* out) const override { out[0] = std::nan(""); }
};

class SingularScore : public EstimatingFunction {
 public:
  Index dim() const override { return 2; }
  Index n_obs() const override { return 4; }
  void eval(Index, const VectorXd& theta, double* out) const override {
    out[0] = theta(0) + theta(1) - 1.0;  // Jacobian rank 1
    out[1] = 2.0 * (theta(0) + theta(1)) - 2.0;
  }
};

ParameterBlocks scalar_block() { return ParameterBlocks({{"theta", 0, 1}}); }

}  // namespace

TEST_CASE("solve finds the sample mean") {
  VectorXd y(3);
  y << 1, 2, 3;
  MeanScore psi(y);
  FitResult fit = solve(psi, nullptr, scalar_block(), VectorXd::Zero(1));
  CHECK(fit.converged);
  CHECK(fit.theta.values(0) == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(fit.iterations <= 3);
}

TEST_CASE("solve finds an affine root independent of the data") {
  AffineScore psi(7, 5.0);
  FitResult fit = solve(psi, nullptr, scalar_block(), VectorXd::Zero(1));
  CHECK(fit.converged);
  CHECK(fit.theta.values(0) == doctest::Approx(5.0).epsilon(1e-8));
}

TEST_CASE("re-solving from the root converges immediately") {
  VectorXd y(3);
  y << 1, 2, 3;
  MeanScore psi(y);
  FitResult fit = solve(psi, nullptr, scalar_block(), VectorXd::Zero(1));
  FitResult again = solve(psi, nullptr, scalar_block(), fit.theta.values);
  CHECK(again.converged);
  CHECK(again.iterations <= 2);
  CHECK(again.theta.values(0) == fit.theta.values(0));
}

TEST_CASE("logistic score matches an independently coded IRWLS fit") {
  Rng rng(42);
  const Index n = 50;
  MatrixXd x(n, 2);
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = rng.normal();
    const double p = 1.0 / (1.0 + std::exp(-(0.3 + 0.8 * x(i, 1))));
    y(i) = rng.bernoulli(p) ? 1.0 : 0.0;
  }

  // Reference fit: iteratively reweighted least squares with analytic Hessian.
  VectorXd beta = VectorXd::Zero(2);
  for (int it = 0; it < 50; ++it) {
    VectorXd p(n), w(n);
    for (Index i = 0; i < n; ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-x.row(i).dot(beta)));
      w(i) = p(i) * (1.0 - p(i));
    }
    const MatrixXd h = x.transpose() * w.asDiagonal() * x;
    const VectorXd g = x.transpose() * (y - p);
    beta += h.ldlt().solve(g);
  }

  LogisticScore psi(x, y);
  FitResult fit = solve(psi, nullptr, ParameterBlocks({{"beta", 0, 2}}), VectorXd::Zero(2));
  CHECK(fit.converged);
  CHECK((fit.theta.values - beta).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("numerical jacobian of a linear map recovers the matrix") {
  MatrixXd m(2, 2);
  m << 1.5, -0.3, 0.7, 2.0;
  auto f = [&](const VectorXd& th) -> VectorXd { return m * th; };
  VectorXd th(2);
  th << 0.4, -1.1;
  const MatrixXd jac = numerical_jacobian(f, th, 3e-6);
  CHECK((jac - m).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("numerical jacobian of coordinate squares") {
  auto f = [](const VectorXd& th) -> VectorXd {
    VectorXd out(2);
    out << th(0) * th(0), th(1) * th(1);
    return out;
  };
  VectorXd th(2);
  th << 1.0, 2.0;
  const MatrixXd jac = numerical_jacobian(f, th, 3e-6);
  CHECK(jac(0, 0) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(jac(1, 1) == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(std::abs(jac(0, 1)) <= 1e-6);
  CHECK(std::abs(jac(1, 0)) <= 1e-6);
}

TEST_CASE("numerical jacobian rejects non-finite evaluations") {
  auto f = [](const VectorXd& th) -> VectorXd {
    VectorXd out(1);
    out << std::log(th(0));
    return out;
  };
  VectorXd th(1);
  th << -1.0;
  CHECK_THROWS_AS(numerical_jacobian(f, th, 3e-6), NumericDomainError);
}

TEST_CASE("sandwich of the mean equation equals the closed form") {
  VectorXd y(3);
  y << 1, 2, 3;
  MeanScore psi(y);
  FitResult fit = solve(psi, nullptr, scalar_block(), VectorXd::Zero(1));
  const MatrixXd v = sandwich_variance(psi, nullptr, fit.theta.values);
  // sum (y - ybar)^2 / n^2 = 2/9
  CHECK(v(0, 0) == doctest::Approx(2.0 / 9.0).epsilon(1e-10));
  // SE equals sqrt(sum (y - ybar)^2) / n
  CHECK(std::sqrt(v(0, 0)) == doctest::Approx(std::sqrt(2.0) / 3.0).epsilon(1e-10));
}

TEST_CASE("sandwich matches the direct HC0 formula for OLS") {
  Rng rng(7);
  const Index n = 120;
  MatrixXd x(n, 3);
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = rng.normal();
    x(i, 2) = rng.uniform();
    // heteroskedastic noise
    y(i) = 0.5 + x(i, 1) - 2.0 * x(i, 2) + (0.3 + 0.5 * x(i, 2)) * rng.normal();
  }
  OlsScore psi(x, y);
  FitResult fit = solve(psi, nullptr, ParameterBlocks({{"beta", 0, 3}}), VectorXd::Zero(3));
  REQUIRE(fit.converged);

  const VectorXd resid = y - x * fit.theta.values;
  const MatrixXd xtx_inv = (x.transpose() * x).inverse();
  const MatrixXd meat = x.transpose() * resid.array().square().matrix().asDiagonal() * x;
  const MatrixXd hc0 = xtx_inv * meat * xtx_inv;

  const MatrixXd v = sandwich_variance(psi, nullptr, fit.theta.values);
  CHECK((v - hc0).cwiseAbs().maxCoeff() <= 1e-8 * hc0.cwiseAbs().maxCoeff());
}

TEST_CASE("bias correction with equal leverages inflates by (1 - 1/n)^{-1}") {
  VectorXd y(6);
  y << 1, 2, 3, 4, 2, 1;
  MeanScore psi(y);
  FitResult fit = solve(psi, nullptr, scalar_block(), VectorXd::Zero(1));
  SandwichResult sw = sandwich_variances(psi, nullptr, fit.theta.values);
  const double n = 6.0;
  CHECK(sw.vcov_bc(0, 0) ==
        doctest::Approx(sw.vcov_uc(0, 0) / (1.0 - 1.0 / n)).epsilon(1e-8));
}

TEST_CASE("weighted mean equation solves the weighted root") {
  VectorXd y(3);
  y << 1, 2, 10;
  VectorXd w(3);
  w << 1, 1, 0;  // dropping the third observation
  MeanScore psi(y);
  FitResult fit = solve(psi, w.data(), scalar_block(), VectorXd::Zero(1));
  CHECK(fit.theta.values(0) == doctest::Approx(1.5).epsilon(1e-10));
}

TEST_CASE("solver reports failure on singular systems instead of crashing") {
  SingularScore psi;
  VectorXd th0(2);
  th0 << 0.2, 0.1;
  FitResult fit = solve(psi, nullptr, ParameterBlocks({{"theta", 0, 2}}), th0);
  CHECK_FALSE(fit.converged);
}

TEST_CASE("non-finite score at the starting point raises a numeric-domain error") {
  NanScore psi;
  CHECK_THROWS_AS(solve(psi, nullptr, scalar_block(), VectorXd::Zero(1)), NumericDomainError);
}

TEST_CASE("singular bread raises a variance error carrying the condition number") {
  SingularScore psi;
  VectorXd th(2);
  th << 0.5, 0.5;
  try {
    sandwich_variance(psi, nullptr, th);
    FAIL("expected VarianceError");
  } catch (const VarianceError& e) {
    CHECK(e.condition_number > 1e12);
  }
}

TEST_CASE("wald intervals") {
  Interval ci = wald_ci(0.0, 1.0, 0.05);
  CHECK(ci.lo == doctest::Approx(-1.959963985).epsilon(1e-8));
  CHECK(ci.hi == doctest::Approx(1.959963985).epsilon(1e-8));

  Interval point = wald_ci(2.0, 0.0, 0.05);
  CHECK(point.lo == 2.0);
  CHECK(point.hi == 2.0);

  Interval example = wald_ci(0.475, 0.079, 0.05);
  CHECK(example.lo == doctest::Approx(0.320).epsilon(1e-2));
  CHECK(example.hi == doctest::Approx(0.630).epsilon(1e-2));

  CHECK_THROWS_AS(wald_ci(0.0, 1.0, 0.0), ArgumentError);
  CHECK_THROWS_AS(wald_ci(0.0, 1.0, 1.5), ArgumentError);
  CHECK_THROWS_AS(wald_ci(0.0, -1.0, 0.05), ArgumentError);
}

TEST_CASE("delta method on the identity and a linear contrast") {
  VectorXd th(1);
  th << 3.0;
  MatrixXd v(1, 1);
  v << 4.0;
  auto id = [](const VectorXd& t) { return t(0); };
  DeltaResult r = delta_method(id, th, v);
  CHECK(r.estimate == doctest::Approx(3.0));
  CHECK(r.se == doctest::Approx(2.0).epsilon(1e-8));

  VectorXd th2(2);
  th2 << 1.0, 4.0;
  auto diff = [](const VectorXd& t) { return t(0) - t(1); };
  DeltaResult r2 = delta_method(diff, th2, MatrixXd::Identity(2, 2));
  CHECK(r2.estimate == doctest::Approx(-3.0));
  CHECK(r2.se == doctest::Approx(std::sqrt(2.0)).epsilon(1e-8));
}

TEST_CASE("sandwich is invariant to observation order") {
  Rng rng(19);
  const Index n = 80;
  MatrixXd x(n, 2);
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = rng.normal();
    y(i) = 1.0 + 0.5 * x(i, 1) + rng.normal();
  }
  OlsScore psi(x, y);
  FitResult fit = solve(psi, nullptr, ParameterBlocks({{"beta", 0, 2}}), VectorXd::Zero(2));
  const MatrixXd v = sandwich_variance(psi, nullptr, fit.theta.values);

  MatrixXd xr = x.colwise().reverse();
  VectorXd yr = y.reverse();
  OlsScore psir(xr, yr);
  FitResult fitr = solve(psir, nullptr, ParameterBlocks({{"beta", 0, 2}}), VectorXd::Zero(2));
  const MatrixXd vr = sandwich_variance(psir, nullptr, fitr.theta.values);

  // Roots are pinned to the solver tolerance; reordering floating-point sums
  // perturbs them within that band but no further.
  CHECK((fit.theta.values - fitr.theta.values).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((v - vr).cwiseAbs().maxCoeff() <= 1e-8 * v.cwiseAbs().maxCoeff());
}
