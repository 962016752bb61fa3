#include "csme/mestim.hpp"

#include <omp.h>

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace csme {

namespace {

constexpr Index kChunk = 512;

std::string format_theta(const VectorXd& theta) {
  std::ostringstream os;
  os << "theta = [";
  for (Index j = 0; j < theta.size(); ++j) {
    if (j) os << ", ";
    os << theta(j);
  }
  os << "]";
  return os.str();
}

double fd_h(double fd_step, double coord) { return fd_step * std::max(1.0, std::abs(coord)); }

// All parameter columns affect all rows when no structure is supplied.
StackStructure dense_structure(const EstimatingFunction& psi) {
  StackStructure s;
  StackStructure::Component c;
  c.row_begin = 0;
  c.row_end = psi.dim();
  c.param_ranges.push_back({0, psi.dim() == 0 ? 0 : std::numeric_limits<Index>::max()});
  s.components.push_back(c);
  return s;
}

}  // namespace

void EstimatingFunction::eval_rows(Index i, const VectorXd& theta, Index row_begin, Index row_end,
                                   double* out) const {
  thread_local std::vector<double> scratch;
  scratch.resize(static_cast<std::size_t>(dim()));
  eval(i, theta, scratch.data());
  std::copy(scratch.begin() + row_begin, scratch.begin() + row_end, out);
}

namespace kernels {

void psi_matrix(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                MatrixXd& out, ExecMode mode) {
  const Index n = psi.n_obs();
  const Index q = psi.dim();
  out.resize(n, q);
  if (mode == ExecMode::serial) {
    std::vector<double> buf(static_cast<std::size_t>(q));
    for (Index i = 0; i < n; ++i) {
      psi.eval(i, theta, buf.data());
      const double w = weights ? weights[i] : 1.0;
      for (Index r = 0; r < q; ++r) out(i, r) = w * buf[static_cast<std::size_t>(r)];
    }
    return;
  }
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<std::size_t>(q));
#pragma omp for schedule(static)
    for (Index i = 0; i < n; ++i) {
      psi.eval(i, theta, buf.data());
      const double w = weights ? weights[i] : 1.0;
      for (Index r = 0; r < q; ++r) out(i, r) = w * buf[static_cast<std::size_t>(r)];
    }
  }
}

VectorXd psi_total(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                   ExecMode mode) {
  const Index n = psi.n_obs();
  const Index q = psi.dim();
  const Index n_chunks = (n + kChunk - 1) / kChunk;
  MatrixXd partial = MatrixXd::Zero(q, n_chunks);

  auto run_chunk = [&](Index c, double* buf) {
    const Index lo = c * kChunk;
    const Index hi = std::min(n, lo + kChunk);
    double* col = partial.col(c).data();
    for (Index i = lo; i < hi; ++i) {
      psi.eval(i, theta, buf);
      const double w = weights ? weights[i] : 1.0;
      for (Index r = 0; r < q; ++r) col[r] += w * buf[r];
    }
  };

  if (mode == ExecMode::serial) {
    std::vector<double> buf(static_cast<std::size_t>(q));
    for (Index c = 0; c < n_chunks; ++c) run_chunk(c, buf.data());
  } else {
#pragma omp parallel
    {
      std::vector<double> buf(static_cast<std::size_t>(q));
#pragma omp for schedule(static)
      for (Index c = 0; c < n_chunks; ++c) run_chunk(c, buf.data());
    }
  }

  // Ordered reduction over chunks keeps the result independent of thread count.
  VectorXd total = VectorXd::Zero(q);
  for (Index c = 0; c < n_chunks; ++c) total += partial.col(c);
  return total;
}

// Sum of one component's rows over observations, same chunked reduction.
static VectorXd component_total(const EstimatingFunction& psi, const double* weights,
                                const VectorXd& theta, Index row_begin, Index row_end,
                                ExecMode mode) {
  const Index n = psi.n_obs();
  const Index r = row_end - row_begin;
  const Index n_chunks = (n + kChunk - 1) / kChunk;
  MatrixXd partial = MatrixXd::Zero(r, n_chunks);

  auto run_chunk = [&](Index c, double* buf) {
    const Index lo = c * kChunk;
    const Index hi = std::min(n, lo + kChunk);
    double* col = partial.col(c).data();
    for (Index i = lo; i < hi; ++i) {
      psi.eval_rows(i, theta, row_begin, row_end, buf);
      const double w = weights ? weights[i] : 1.0;
      for (Index k = 0; k < r; ++k) col[k] += w * buf[k];
    }
  };

  if (mode == ExecMode::serial) {
    std::vector<double> buf(static_cast<std::size_t>(r));
    for (Index c = 0; c < n_chunks; ++c) run_chunk(c, buf.data());
  } else {
#pragma omp parallel
    {
      std::vector<double> buf(static_cast<std::size_t>(r));
#pragma omp for schedule(static)
      for (Index c = 0; c < n_chunks; ++c) run_chunk(c, buf.data());
    }
  }

  VectorXd total = VectorXd::Zero(r);
  for (Index c = 0; c < n_chunks; ++c) total += partial.col(c);
  return total;
}

MatrixXd fd_jacobian(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
                     double fd_step, ExecMode mode, const StackStructure* structure) {
  const Index q = psi.dim();
  StackStructure dense;
  if (!structure) {
    dense = dense_structure(psi);
    structure = &dense;
  }
  MatrixXd jac = MatrixXd::Zero(q, q);
  VectorXd th = theta;
  for (Index j = 0; j < q; ++j) {
    const double h = fd_h(fd_step, theta(j));
    for (const auto& comp : structure->components) {
      if (!comp.depends_on(j)) continue;
      th(j) = theta(j) + h;
      const VectorXd up = component_total(psi, weights, th, comp.row_begin, comp.row_end, mode);
      th(j) = theta(j) - h;
      const VectorXd dn = component_total(psi, weights, th, comp.row_begin, comp.row_end, mode);
      th(j) = theta(j);
      jac.block(comp.row_begin, j, comp.row_end - comp.row_begin, 1) = (up - dn) / (2.0 * h);
    }
  }
  if (!jac.allFinite())
    throw NumericDomainError("non-finite Jacobian entries at " + format_theta(theta));
  return jac;
}

}  // namespace kernels

MatrixXd numerical_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                            const VectorXd& theta, double fd_step) {
  VectorXd th = theta;
  MatrixXd jac;
  for (Index j = 0; j < theta.size(); ++j) {
    const double h = fd_h(fd_step, theta(j));
    th(j) = theta(j) + h;
    const VectorXd up = f(th);
    th(j) = theta(j) - h;
    const VectorXd dn = f(th);
    th(j) = theta(j);
    if (!up.allFinite() || !dn.allFinite())
      throw NumericDomainError("non-finite evaluation while differencing at " + format_theta(theta));
    if (jac.size() == 0) jac.resize(up.size(), theta.size());
    jac.col(j) = (up - dn) / (2.0 * h);
  }
  return jac;
}

FitResult solve(const EstimatingFunction& psi, const double* weights, const ParameterBlocks& blocks,
                const VectorXd& theta0, const SolveOptions& opts, ExecMode mode,
                const StackStructure* structure) {
  if (theta0.size() != psi.dim())
    throw DimensionError("starting value dimension does not match estimating function");
  if (opts.tol <= 0.0 || opts.max_iter < 1) throw ArgumentError("invalid solver options");

  const Index n = psi.n_obs();
  const double target = opts.tol * static_cast<double>(n);

  FitResult result;
  result.theta.blocks = blocks;

  VectorXd theta = theta0;
  VectorXd resid = kernels::psi_total(psi, weights, theta, mode);
  if (!resid.allFinite())
    throw NumericDomainError("estimating function is non-finite at " + format_theta(theta));
  double rnorm = resid.lpNorm<Eigen::Infinity>();

  bool converged = rnorm <= target;
  int iterations = 0;

  while (!converged && iterations < opts.max_iter) {
    MatrixXd jac;
    try {
      jac = kernels::fd_jacobian(psi, weights, theta, opts.fd_step, mode, structure);
    } catch (const NumericDomainError&) {
      break;  // treat as unusable Jacobian: return best iterate, converged=false
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(jac);
    if (qr.rank() < psi.dim()) break;
    const VectorXd step = qr.solve(-resid);
    if (!step.allFinite()) break;

    double scale = opts.damping;
    bool accepted = false;
    while (scale >= opts.damping_floor) {
      const VectorXd trial = theta + scale * step;
      VectorXd rt;
      double rtnorm = std::numeric_limits<double>::infinity();
      try {
        rt = kernels::psi_total(psi, weights, trial, mode);
        if (rt.allFinite()) rtnorm = rt.lpNorm<Eigen::Infinity>();
      } catch (const NumericDomainError&) {
        // overflow guards and domain failures reject the trial step
      }
      if (rtnorm < rnorm) {
        theta = trial;
        resid = rt;
        rnorm = rtnorm;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    ++iterations;
    if (!accepted) break;
    converged = rnorm <= target;
  }

  result.theta.values = theta;
  result.converged = converged;
  result.iterations = iterations;
  result.max_residual = rnorm;
  return result;
}

namespace {

struct FdVariancePass {
  MatrixXd bread_sum;      // A = sum_i w_i * (-d psi_i / d theta)
  VectorXd leverage;       // H_ii = tr(A_i A^{-1}); filled by second phase
};

// One central-difference sweep over parameter columns. When `ai_storage` is
// non-null, per-observation Jacobian contributions are stored (n * q * q); the
// caller falls back to a second recomputing sweep when that would be too large.
void fd_sweep(const EstimatingFunction& psi, const double* weights, const VectorXd& theta,
              double fd_step, ExecMode mode, const StackStructure& structure, MatrixXd* bread_sum,
              std::vector<double>* ai_storage, const MatrixXd* bread_inv, VectorXd* leverage) {
  const Index n = psi.n_obs();
  const Index q = psi.dim();
  const Index n_chunks = (n + kChunk - 1) / kChunk;

  VectorXd thp = theta, thm = theta;
  for (Index j = 0; j < q; ++j) {
    const double h = fd_h(fd_step, theta(j));
    thp(j) = theta(j) + h;
    thm(j) = theta(j) - h;
    for (const auto& comp : structure.components) {
      if (!comp.depends_on(j)) continue;
      const Index r = comp.row_end - comp.row_begin;
      MatrixXd partial = bread_sum ? MatrixXd::Zero(r, n_chunks) : MatrixXd();

      auto run_chunk = [&](Index c, double* bp, double* bm) {
        const Index lo = c * kChunk;
        const Index hi = std::min(n, lo + kChunk);
        for (Index i = lo; i < hi; ++i) {
          psi.eval_rows(i, thp, comp.row_begin, comp.row_end, bp);
          psi.eval_rows(i, thm, comp.row_begin, comp.row_end, bm);
          const double w = weights ? weights[i] : 1.0;
          for (Index k = 0; k < r; ++k) {
            // Contribution to A_i(row, j) = -w * d psi_i[row] / d theta_j.
            const double d = -w * (bp[k] - bm[k]) / (2.0 * h);
            if (bread_sum) partial(k, c) += d;
            const Index row = comp.row_begin + k;
            if (ai_storage)
              (*ai_storage)[static_cast<std::size_t>((i * q + row) * q + j)] = d;
            if (leverage) (*leverage)(i) += d * (*bread_inv)(j, row);
          }
        }
      };

      if (mode == ExecMode::serial) {
        std::vector<double> bp(static_cast<std::size_t>(r)), bm(static_cast<std::size_t>(r));
        for (Index c = 0; c < n_chunks; ++c) run_chunk(c, bp.data(), bm.data());
      } else {
#pragma omp parallel
        {
          std::vector<double> bp(static_cast<std::size_t>(r)), bm(static_cast<std::size_t>(r));
#pragma omp for schedule(static)
          for (Index c = 0; c < n_chunks; ++c) run_chunk(c, bp.data(), bm.data());
        }
      }

      if (bread_sum)
        for (Index c = 0; c < n_chunks; ++c)
          bread_sum->block(comp.row_begin, j, r, 1) += partial.col(c);
    }
    thp(j) = theta(j);
    thm(j) = theta(j);
  }
}

}  // namespace

SandwichResult sandwich_variances(const EstimatingFunction& psi, const double* weights,
                                  const VectorXd& theta_hat, const SolveOptions& opts,
                                  ExecMode mode, const StackStructure* structure) {
  const Index n = psi.n_obs();
  const Index q = psi.dim();
  StackStructure dense;
  if (!structure) {
    dense = dense_structure(psi);
    structure = &dense;
  }

  MatrixXd psi0;
  kernels::psi_matrix(psi, weights, theta_hat, psi0, mode);
  if (!psi0.allFinite())
    throw NumericDomainError("estimating function non-finite at " + format_theta(theta_hat));
  const MatrixXd meat = psi0.transpose() * psi0 / static_cast<double>(n);

  const bool store_ai =
      static_cast<double>(n) * static_cast<double>(q) * static_cast<double>(q) * 8.0 < 2.56e8;
  std::vector<double> ai_storage;
  if (store_ai) ai_storage.assign(static_cast<std::size_t>(n * q * q), 0.0);

  MatrixXd bread_sum = MatrixXd::Zero(q, q);
  fd_sweep(psi, weights, theta_hat, opts.fd_step, mode, *structure, &bread_sum,
           store_ai ? &ai_storage : nullptr, nullptr, nullptr);

  Eigen::JacobiSVD<MatrixXd> svd(bread_sum);
  const double smax = svd.singularValues()(0);
  const double smin = svd.singularValues()(q - 1);
  const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(smin > 0.0) || cond > 1e12)
    throw VarianceError("bread matrix is numerically singular (condition number " +
                            std::to_string(cond) + ")",
                        cond);

  const MatrixXd bread_inv = bread_sum.inverse();        // A_sum^{-1}
  const MatrixXd bread_n_inv = bread_inv * static_cast<double>(n);  // (A_sum/n)^{-1}

  SandwichResult out;
  out.bread_condition = cond;
  out.vcov_uc = bread_n_inv * meat * bread_n_inv.transpose() / static_cast<double>(n);
  out.vcov_uc = 0.5 * (out.vcov_uc + out.vcov_uc.transpose()).eval();

  // Leverages H_ii = tr(A_i A_sum^{-1}).
  VectorXd leverage = VectorXd::Zero(n);
  if (store_ai) {
    if (mode == ExecMode::serial) {
      for (Index i = 0; i < n; ++i) {
        double h = 0.0;
        const double* ai = ai_storage.data() + static_cast<std::size_t>(i * q * q);
        for (Index row = 0; row < q; ++row)
          for (Index j = 0; j < q; ++j) h += ai[row * q + j] * bread_inv(j, row);
        leverage(i) = h;
      }
    } else {
#pragma omp parallel for schedule(static)
      for (Index i = 0; i < n; ++i) {
        double h = 0.0;
        const double* ai = ai_storage.data() + static_cast<std::size_t>(i * q * q);
        for (Index row = 0; row < q; ++row)
          for (Index j = 0; j < q; ++j) h += ai[row * q + j] * bread_inv(j, row);
        leverage(i) = h;
      }
    }
  } else {
    fd_sweep(psi, weights, theta_hat, opts.fd_step, mode, *structure, nullptr, nullptr, &bread_inv,
             &leverage);
  }

  MatrixXd psi_bc = psi0;
  for (Index i = 0; i < n; ++i) {
    const double h = std::min(opts.leverage_truncation, leverage(i));
    psi_bc.row(i) *= 1.0 / std::sqrt(1.0 - h);
  }
  const MatrixXd meat_bc = psi_bc.transpose() * psi_bc / static_cast<double>(n);
  out.vcov_bc = bread_n_inv * meat_bc * bread_n_inv.transpose() / static_cast<double>(n);
  out.vcov_bc = 0.5 * (out.vcov_bc + out.vcov_bc.transpose()).eval();
  return out;
}

MatrixXd sandwich_variance(const EstimatingFunction& psi, const double* weights,
                           const VectorXd& theta_hat, const SolveOptions& opts, ExecMode mode) {
  return sandwich_variances(psi, weights, theta_hat, opts, mode).vcov_uc;
}

MatrixXd bias_corrected_variance(const EstimatingFunction& psi, const double* weights,
                                 const VectorXd& theta_hat, const SolveOptions& opts,
                                 ExecMode mode) {
  return sandwich_variances(psi, weights, theta_hat, opts, mode).vcov_bc;
}

FitResult fit_mestimator(const EstimatingFunction& psi, const double* weights,
                         const ParameterBlocks& blocks, const VectorXd& theta0,
                         const SolveOptions& opts, ExecMode mode,
                         const StackStructure* structure) {
  FitResult fit = solve(psi, weights, blocks, theta0, opts, mode, structure);
  if (fit.converged) {
    SandwichResult sw = sandwich_variances(psi, weights, fit.theta.values, opts, mode, structure);
    fit.vcov_uc = std::move(sw.vcov_uc);
    fit.vcov_bc = std::move(sw.vcov_bc);
    fit.bread_condition = sw.bread_condition;
  }
  return fit;
}

double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> dist(0.0, 1.0);
  return boost::math::quantile(dist, p);
}

Interval wald_ci(double estimate, double se, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must be in (0, 1)");
  if (se < 0.0) throw ArgumentError("standard error must be nonnegative");
  const double z = normal_quantile(1.0 - alpha / 2.0);
  return {estimate - z * se, estimate + z * se};
}

DeltaResult delta_method(const std::function<double(const VectorXd&)>& g, const VectorXd& theta_hat,
                         const MatrixXd& vcov, double fd_step) {
  const Index q = theta_hat.size();
  VectorXd grad(q);
  VectorXd th = theta_hat;
  for (Index j = 0; j < q; ++j) {
    const double h = fd_h(fd_step, theta_hat(j));
    th(j) = theta_hat(j) + h;
    const double up = g(th);
    th(j) = theta_hat(j) - h;
    const double dn = g(th);
    th(j) = theta_hat(j);
    grad(j) = (up - dn) / (2.0 * h);
  }
  if (!grad.allFinite())
    throw NumericDomainError("non-finite gradient in delta method at " + format_theta(theta_hat));
  const double var = grad.dot(vcov * grad);
  return {g(theta_hat), std::sqrt(std::max(0.0, var))};
}

}  // namespace csme
