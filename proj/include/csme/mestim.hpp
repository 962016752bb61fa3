#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

#include "csme/core_data.hpp"

namespace csme {

// Execution mode of the data-parallel kernels. Parallel kernels produce
// bit-identical results to the serial reference for any thread count: each
// observation writes its own slot and reductions run over fixed-size chunks in
// index order.
enum class ExecMode { serial, parallel };

// Per-observation estimating function psi(i, theta) -> R^q. Implementations
// must be pure: eval may be called concurrently for different i.
class EstimatingFunction {
 public:
  virtual ~EstimatingFunction() = default;
  virtual Index dim() const = 0;
  virtual Index n_obs() const = 0;
  virtual void eval(Index i, const VectorXd& theta, double* out) const = 0;
  // Evaluate only rows [row_begin, row_end). The default evaluates everything
  // and copies the slice; stacked functions override to touch only the
  // components that own those rows.
  virtual void eval_rows(Index i, const VectorXd& theta, Index row_begin, Index row_end,
                         double* out) const;
};

// Optional structure metadata for stacked systems: which rows each component
// owns and which parameter columns it reads. Finite differencing skips
// components that do not depend on the perturbed column; their difference is
// exactly zero, so the result is bit-identical to the dense evaluation.
struct StackStructure {
  struct Component {
    Index row_begin = 0;
    Index row_end = 0;
    std::vector<std::pair<Index, Index>> param_ranges;  // [begin, end) pairs

    bool depends_on(Index param) const {
      for (const auto& [b, e] : param_ranges)
        if (param >= b && param < e) return true;
      return false;
    }
  };
  std::vector<Component> components;
};

struct SolveOptions {
  double tol = 1e-8;                 // convergence: ||sum psi||_inf <= tol * n
  int max_iter = 100;
  double damping = 1.0;              // initial step scale, halved on residual increase
  double damping_floor = 1.0 / 64.0;
  double fd_step = 3.0e-6;           // relative step, default near cbrt(machine eps)
  double leverage_truncation = 0.75; // Fay-Graubard leverage cap for the BC variance
};

// ---- kernels (OpenMP with serial reference) --------------------------------

namespace kernels {

// Fills out (n x q) with rows w_i * psi(i, theta).
void psi_matrix(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                MatrixXd& out, ExecMode mode);

// sum_i w_i * psi(i, theta), reduced deterministically (fixed chunks, ordered).
VectorXd psi_total(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                   ExecMode mode);

// Central-difference Jacobian of psi_total at theta; h_j = fd_step*max(1,|theta_j|).
// When structure is given, unaffected components are skipped (identical result).
MatrixXd fd_jacobian(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                     double fd_step, ExecMode mode, const StackStructure* structure = nullptr);

}  // namespace kernels

// ---- operations --------------------------------------------------------------

// Central-difference Jacobian of an arbitrary vector map.
MatrixXd numerical_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                            const VectorXd& theta, double fd_step);

// Damped Newton on sum_i w_i psi(i, theta) = 0. Singular Jacobians and
// exhausted damping yield converged=false with the best iterate; non-finite
// psi at an accepted iterate throws NumericDomainError naming theta.
FitResult solve(const EstimatingFunction& psi, const double* weights, const ParameterBlocks& blocks,
                const VectorXd& theta0, const SolveOptions& opts = {},
                ExecMode mode = ExecMode::parallel, const StackStructure* structure = nullptr);

struct SandwichResult {
  MatrixXd vcov_uc;
  MatrixXd vcov_bc;
  double bread_condition = 0.0;
};

// Empirical sandwich A^{-1} B A^{-T} / n with A = -n^{-1} d(sum psi)/d theta and
// B = n^{-1} sum psi_i psi_i^T, plus the bias-corrected variant that inflates
// each observation's psi_i by {1 - min(b, H_ii)}^{-1/2}, H_ii = tr(A_i A_sum^{-1}).
SandwichResult sandwich_variances(const EstimatingFunction& psi, const double* weights,
                                  const VectorXd& theta_hat, const SolveOptions& opts = {},
                                  ExecMode mode = ExecMode::parallel,
                                  const StackStructure* structure = nullptr);

MatrixXd sandwich_variance(const EstimatingFunction& psi, const double* weights,
                           const VectorXd& theta_hat, const SolveOptions& opts = {},
                           ExecMode mode = ExecMode::parallel);

MatrixXd bias_corrected_variance(const EstimatingFunction& psi, const double* weights,
                                 const VectorXd& theta_hat, const SolveOptions& opts = {},
                                 ExecMode mode = ExecMode::parallel);

// Convenience: solve then attach both sandwich matrices (when converged).
FitResult fit_mestimator(const EstimatingFunction& psi, const double* weights,
                         const ParameterBlocks& blocks, const VectorXd& theta0,
                         const SolveOptions& opts = {}, ExecMode mode = ExecMode::parallel,
                         const StackStructure* structure = nullptr);

double normal_quantile(double p);

struct Interval {
  double lo;
  double hi;
};

Interval wald_ci(double estimate, double se, double alpha);

struct DeltaResult {
  double estimate;
  double se;
};

// Delta method with a numerical gradient of g at theta_hat.
DeltaResult delta_method(const std::function<double(const VectorXd&)>& g, const VectorXd& theta_hat,
                         const MatrixXd& vcov, double fd_step = 3.0e-6);

}  // namespace csme
