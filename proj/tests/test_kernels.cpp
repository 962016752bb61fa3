#include <doctest.h>

#include <omp.h>

#include <cmath>

#include "csme/mestim.hpp"
#include "csme/rng.hpp"

using namespace csme;

namespace {

// Two-component stack with disjoint parameter dependencies, overriding
// eval_rows so the componentwise path is exercised.
class TwoBlockScore : public EstimatingFunction {
 public:
  explicit TwoBlockScore(MatrixXd data) : data_(std::move(data)) {}

  Index dim() const override { return 3; }
  Index n_obs() const override { return data_.rows(); }

  void eval(Index i, const VectorXd& theta, double* out) const override {
    eval_block0(i, theta, out);
    eval_block1(i, theta, out + 2);
  }

  void eval_rows(Index i, const VectorXd& theta, Index row_begin, Index row_end,
                 double* out) const override {
    Index o = 0;
    if (row_begin < 2 && row_end > 0) {
      eval_block0(i, theta, out);
      o = 2 - row_begin;
    }
    if (row_end > 2) eval_block1(i, theta, out + o);
  }

  StackStructure structure() const {
    StackStructure s;
    s.components.push_back({0, 2, {{0, 2}}});
    s.components.push_back({2, 3, {{2, 3}}});
    return s;
  }

 private:
  void eval_block0(Index i, const VectorXd& theta, double* out) const {
    out[0] = data_(i, 0) - theta(0);
    out[1] = (data_(i, 0) - theta(0)) * (data_(i, 0) - theta(0)) - theta(1);
  }
  void eval_block1(Index i, const VectorXd& theta, double* out) const {
    out[0] = std::exp(0.3 * data_(i, 1)) - theta(2);
  }

  MatrixXd data_;
};

MatrixXd kernel_test_data(Index n) {
  Rng rng(404);
  MatrixXd d(n, 2);
  for (Index i = 0; i < n; ++i) {
    d(i, 0) = rng.normal();
    d(i, 1) = rng.uniform();
  }
  return d;
}

}  // namespace

TEST_CASE("psi matrix and totals agree between serial and parallel kernels") {
  TwoBlockScore psi(kernel_test_data(1537));
  VectorXd theta(3);
  theta << 0.1, 0.9, 1.2;

  MatrixXd m_serial, m_parallel;
  kernels::psi_matrix(psi, nullptr, theta, m_serial, ExecMode::serial);
  kernels::psi_matrix(psi, nullptr, theta, m_parallel, ExecMode::parallel);
  CHECK((m_serial - m_parallel).cwiseAbs().maxCoeff() == 0.0);

  const VectorXd t_serial = kernels::psi_total(psi, nullptr, theta, ExecMode::serial);
  const VectorXd t_parallel = kernels::psi_total(psi, nullptr, theta, ExecMode::parallel);
  CHECK((t_serial - t_parallel).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("totals are identical for any thread count") {
  TwoBlockScore psi(kernel_test_data(2049));
  VectorXd theta(3);
  theta << -0.2, 1.1, 0.8;

  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const VectorXd t1 = kernels::psi_total(psi, nullptr, theta, ExecMode::parallel);
  omp_set_num_threads(4);
  const VectorXd t4 = kernels::psi_total(psi, nullptr, theta, ExecMode::parallel);
  omp_set_num_threads(3);
  const VectorXd t3 = kernels::psi_total(psi, nullptr, theta, ExecMode::parallel);
  omp_set_num_threads(saved);

  CHECK((t1 - t4).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t1 - t3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("structure-aware differencing matches the dense jacobian bit for bit") {
  TwoBlockScore psi(kernel_test_data(613));
  StackStructure st = psi.structure();
  VectorXd theta(3);
  theta << 0.4, 1.3, 1.05;

  const MatrixXd dense = kernels::fd_jacobian(psi, nullptr, theta, 3e-6, ExecMode::parallel);
  const MatrixXd sparse =
      kernels::fd_jacobian(psi, nullptr, theta, 3e-6, ExecMode::parallel, &st);
  CHECK((dense - sparse).cwiseAbs().maxCoeff() == 0.0);
  // Unaffected blocks are exact zeros in both paths.
  CHECK(dense(2, 0) == 0.0);
  CHECK(sparse(2, 0) == 0.0);
  CHECK(dense(0, 2) == 0.0);
}

TEST_CASE("variance pass agrees between structured and dense evaluation") {
  TwoBlockScore psi(kernel_test_data(800));
  StackStructure st = psi.structure();
  VectorXd theta(3);
  // fit the stack first
  FitResult fit = solve(psi, nullptr, ParameterBlocks({{"theta", 0, 3}}), VectorXd::Ones(3));
  REQUIRE(fit.converged);
  theta = fit.theta.values;

  SandwichResult dense = sandwich_variances(psi, nullptr, theta);
  SandwichResult structured =
      sandwich_variances(psi, nullptr, theta, SolveOptions{}, ExecMode::parallel, &st);
  CHECK((dense.vcov_uc - structured.vcov_uc).cwiseAbs().maxCoeff() == 0.0);
  CHECK((dense.vcov_bc - structured.vcov_bc).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("weighted kernels scale observation contributions") {
  TwoBlockScore psi(kernel_test_data(100));
  VectorXd theta(3);
  theta << 0.0, 1.0, 1.0;
  VectorXd w = VectorXd::Constant(100, 2.0);
  const VectorXd t1 = kernels::psi_total(psi, nullptr, theta, ExecMode::parallel);
  const VectorXd t2 = kernels::psi_total(psi, w.data(), theta, ExecMode::parallel);
  CHECK((2.0 * t1 - t2).cwiseAbs().maxCoeff() <= 1e-12 * t2.cwiseAbs().maxCoeff());
}
