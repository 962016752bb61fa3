#include "csme/core_data.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

namespace csme {

namespace {

void require_finite(const MatrixXd& m, const std::string& what) {
  if (!m.allFinite()) throw DataError("missing or non-finite values in " + what);
}

}  // namespace

Dataset::Dataset(VectorXd y, MatrixXd l, MatrixXd a_star,
                 std::vector<std::string> covariate_names,
                 std::vector<std::string> exposure_names,
                 std::optional<VectorXd> sample_weight,
                 std::optional<VectorXi> case_indicator,
                 std::optional<VectorXi> replicate_group,
                 std::optional<MatrixXd> true_exposures)
    : y_(std::move(y)),
      l_(std::move(l)),
      a_star_(std::move(a_star)),
      covariate_names_(std::move(covariate_names)),
      exposure_names_(std::move(exposure_names)),
      sample_weight_(std::move(sample_weight)),
      case_indicator_(std::move(case_indicator)),
      replicate_group_(std::move(replicate_group)),
      true_exposures_(std::move(true_exposures)) {
  const Index n = y_.size();
  if (n == 0) throw DimensionError("dataset has no rows");
  if (l_.rows() != n || a_star_.rows() != n)
    throw DimensionError("covariate/exposure row counts do not match outcome length");
  require_finite(y_, "outcome");
  require_finite(l_, "covariates");
  require_finite(a_star_, "measured exposures");

  if (covariate_names_.empty())
    for (Index j = 0; j < l_.cols(); ++j) covariate_names_.push_back("l" + std::to_string(j + 1));
  if (exposure_names_.empty())
    for (Index j = 0; j < a_star_.cols(); ++j) exposure_names_.push_back("a" + std::to_string(j + 1));
  if (static_cast<Index>(covariate_names_.size()) != l_.cols() ||
      static_cast<Index>(exposure_names_.size()) != a_star_.cols())
    throw DimensionError("column name counts do not match matrix widths");

  if (sample_weight_) {
    if (sample_weight_->size() != n) throw DimensionError("sample_weight length mismatch");
    require_finite(*sample_weight_, "sample weights");
    if ((sample_weight_->array() < 0.0).any())
      throw DataError("sample weights must be nonnegative");
    if (!(sample_weight_->array() > 0.0).any())
      throw DataError("at least one sample weight must be positive");
  }
  if (case_indicator_) {
    if (case_indicator_->size() != n) throw DimensionError("case indicator length mismatch");
    for (Index i = 0; i < n; ++i) {
      const int v = (*case_indicator_)(i);
      if (v != 0 && v != 1) throw DataError("case indicator must be 0/1");
    }
  }
  if (replicate_group_ && replicate_group_->size() != n)
    throw DimensionError("replicate group length mismatch");
  if (true_exposures_) {
    if (true_exposures_->rows() != n || true_exposures_->cols() != a_star_.cols())
      throw DimensionError("true exposure matrix shape mismatch");
    require_finite(*true_exposures_, "true exposures");
  }
}

Index Dataset::covariate_index(const std::string& name) const {
  auto it = std::find(covariate_names_.begin(), covariate_names_.end(), name);
  if (it == covariate_names_.end()) throw ArgumentError("unknown covariate column: " + name);
  return it - covariate_names_.begin();
}

Index Dataset::exposure_index(const std::string& name) const {
  auto it = std::find(exposure_names_.begin(), exposure_names_.end(), name);
  if (it == exposure_names_.end()) throw ArgumentError("unknown exposure column: " + name);
  return it - exposure_names_.begin();
}

Dataset Dataset::subset(const std::vector<Index>& rows,
                        std::optional<VectorXd> new_weights) const {
  const Index k = static_cast<Index>(rows.size());
  VectorXd y(k);
  MatrixXd l(k, l_.cols()), a(k, a_star_.cols());
  std::optional<VectorXi> cases, groups;
  std::optional<MatrixXd> truth;
  if (case_indicator_) cases = VectorXi(k);
  if (replicate_group_) groups = VectorXi(k);
  if (true_exposures_) truth = MatrixXd(k, a_star_.cols());
  for (Index r = 0; r < k; ++r) {
    const Index i = rows[static_cast<std::size_t>(r)];
    y(r) = y_(i);
    l.row(r) = l_.row(i);
    a.row(r) = a_star_.row(i);
    if (cases) (*cases)(r) = (*case_indicator_)(i);
    if (groups) (*groups)(r) = (*replicate_group_)(i);
    if (truth) truth->row(r) = true_exposures_->row(i);
  }
  return Dataset(std::move(y), std::move(l), std::move(a), covariate_names_, exposure_names_,
                 std::move(new_weights), std::move(cases), std::move(groups), std::move(truth));
}

Dataset Dataset::with_exposures(MatrixXd a_new) const {
  return Dataset(y_, l_, std::move(a_new), covariate_names_, exposure_names_, sample_weight_,
                 case_indicator_, replicate_group_, true_exposures_);
}

MeCovariance factor_me_covariance(const MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols()) throw DimensionError("Sigma_me must be square");
  const Index m = sigma.rows();
  const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw DimensionError("Sigma_me must be symmetric");

  MeCovariance out;
  out.sigma = 0.5 * (sigma + sigma.transpose());
  out.error_free.assign(static_cast<std::size_t>(m), false);
  for (Index j = 0; j < m; ++j) {
    const bool zero_row =
        out.sigma.row(j).cwiseAbs().maxCoeff() == 0.0 && out.sigma.col(j).cwiseAbs().maxCoeff() == 0.0;
    out.error_free[static_cast<std::size_t>(j)] = zero_row;
  }

  // Fast path: exactly diagonal input factors to diag(sqrt(d)).
  bool diagonal = true;
  for (Index i = 0; i < m && diagonal; ++i)
    for (Index j = 0; j < m; ++j)
      if (i != j && out.sigma(i, j) != 0.0) {
        diagonal = false;
        break;
      }
  if (diagonal) {
    double max_d = 0.0;
    for (Index j = 0; j < m; ++j) max_d = std::max(max_d, out.sigma(j, j));
    std::vector<Index> keep;
    for (Index j = 0; j < m; ++j) {
      double d = out.sigma(j, j);
      if (d < -1e-10 * max_d)
        throw NotPsdError("Sigma_me has eigenvalue " + std::to_string(d) + " below PSD tolerance");
      if (d > 0.0) keep.push_back(j);
    }
    out.factor = MatrixXd::Zero(m, static_cast<Index>(keep.size()));
    for (Index c = 0; c < static_cast<Index>(keep.size()); ++c)
      out.factor(keep[static_cast<std::size_t>(c)], c) =
          std::sqrt(out.sigma(keep[static_cast<std::size_t>(c)], keep[static_cast<std::size_t>(c)]));
    return out;
  }

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(out.sigma);
  if (es.info() != Eigen::Success) throw NotPsdError("eigendecomposition of Sigma_me failed");
  const VectorXd ev = es.eigenvalues();
  const double max_ev = std::max(0.0, ev.maxCoeff());
  std::vector<Index> keep;
  for (Index j = 0; j < m; ++j) {
    if (ev(j) < -1e-10 * std::max(max_ev, 1e-300))
      throw NotPsdError("Sigma_me has eigenvalue " + std::to_string(ev(j)) +
                        " below PSD tolerance (max eigenvalue " + std::to_string(max_ev) + ")");
    if (ev(j) > 0.0) keep.push_back(j);
  }
  out.factor = MatrixXd::Zero(m, static_cast<Index>(keep.size()));
  for (Index c = 0; c < static_cast<Index>(keep.size()); ++c) {
    const Index j = keep[static_cast<std::size_t>(c)];
    out.factor.col(c) = es.eigenvectors().col(j) * std::sqrt(ev(j));
  }
  // Error-free exposures must receive exactly-zero perturbations.
  for (Index j = 0; j < m; ++j)
    if (out.error_free[static_cast<std::size_t>(j)]) out.factor.row(j).setZero();
  return out;
}

ParameterBlocks::ParameterBlocks(std::vector<ParameterBlock> blocks) : blocks_(std::move(blocks)) {
  Index expect = 0;
  for (const auto& b : blocks_) {
    if (b.offset != expect) throw ArgumentError("parameter blocks must partition the index range");
    if (b.size <= 0) throw ArgumentError("parameter block '" + b.name + "' is empty");
    for (const auto& other : blocks_)
      if (&other != &b && other.name == b.name)
        throw ArgumentError("duplicate parameter block name: " + b.name);
    expect += b.size;
  }
  total_ = expect;
}

const ParameterBlock& ParameterBlocks::block(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw ArgumentError("unknown parameter block: " + name);
}

bool ParameterBlocks::has_block(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return true;
  return false;
}

}  // namespace csme
