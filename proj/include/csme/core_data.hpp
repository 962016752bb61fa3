#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "csme/error.hpp"

namespace csme {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// Immutable container of one analysis sample: outcome y, covariates L (n x p),
// measured exposures A* (n x m), and the optional columns used by two-phase
// designs and replicate-based error-variance estimation. Construction
// validates shapes and rejects missing values; afterwards the data are
// read-only and safe to share across threads.
class Dataset {
 public:
  Dataset(VectorXd y, MatrixXd l, MatrixXd a_star,
          std::vector<std::string> covariate_names = {},
          std::vector<std::string> exposure_names = {},
          std::optional<VectorXd> sample_weight = std::nullopt,
          std::optional<VectorXi> case_indicator = std::nullopt,
          std::optional<VectorXi> replicate_group = std::nullopt,
          std::optional<MatrixXd> true_exposures = std::nullopt);

  Index n() const { return y_.size(); }
  Index n_covariates() const { return l_.cols(); }
  Index n_exposures() const { return a_star_.cols(); }

  const VectorXd& y() const { return y_; }
  const MatrixXd& l() const { return l_; }
  const MatrixXd& a_star() const { return a_star_; }

  bool has_sample_weight() const { return sample_weight_.has_value(); }
  const VectorXd& sample_weight() const { return *sample_weight_; }
  // Pointer form used by the fitting engine (nullptr means unit weights).
  const double* weight_data() const {
    return sample_weight_ ? sample_weight_->data() : nullptr;
  }

  bool has_case_indicator() const { return case_indicator_.has_value(); }
  const VectorXi& case_indicator() const { return *case_indicator_; }

  bool has_replicate_group() const { return replicate_group_.has_value(); }
  const VectorXi& replicate_group() const { return *replicate_group_; }

  // True exposure values; populated by simulation generators for oracle fits
  // or mapped from user columns for validation runs.
  bool has_true_exposures() const { return true_exposures_.has_value(); }
  const MatrixXd& true_exposures() const { return *true_exposures_; }

  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  const std::vector<std::string>& exposure_names() const { return exposure_names_; }

  Index covariate_index(const std::string& name) const;
  Index exposure_index(const std::string& name) const;

  // Copy with a subset of rows (two-phase selection) and new weights.
  Dataset subset(const std::vector<Index>& rows, std::optional<VectorXd> new_weights) const;

  // Copy with the measured exposures replaced (regression calibration, SIMEX).
  Dataset with_exposures(MatrixXd a_new) const;

 private:
  VectorXd y_;
  MatrixXd l_;
  MatrixXd a_star_;
  std::vector<std::string> covariate_names_;
  std::vector<std::string> exposure_names_;
  std::optional<VectorXd> sample_weight_;
  std::optional<VectorXi> case_indicator_;
  std::optional<VectorXi> replicate_group_;
  std::optional<MatrixXd> true_exposures_;
};

// Measurement-error covariance with a factor F such that F F^T = Sigma_me.
// Rows/columns that are identically zero mark error-free exposures; the factor
// keeps those rows exactly zero so sampled perturbations vanish exactly.
struct MeCovariance {
  MatrixXd sigma;
  MatrixXd factor;  // m x r, r = rank
  std::vector<bool> error_free;

  Index dim() const { return sigma.rows(); }
  Index rank() const { return factor.cols(); }
  bool is_zero() const { return factor.cols() == 0; }
};

// Eigenvalue factorization with PSD enforcement by clipping. Eigenvalues below
// -1e-10 * max_eigenvalue are rejected as not PSD; small negatives above that
// threshold are clipped to zero since user-estimated covariances can be
// numerically indefinite.
MeCovariance factor_me_covariance(const MatrixXd& sigma);

// Named, contiguous slices of a parameter vector.
struct ParameterBlock {
  std::string name;
  Index offset;
  Index size;
};

class ParameterBlocks {
 public:
  ParameterBlocks() = default;
  explicit ParameterBlocks(std::vector<ParameterBlock> blocks);

  Index total_size() const { return total_; }
  const std::vector<ParameterBlock>& blocks() const { return blocks_; }
  const ParameterBlock& block(const std::string& name) const;
  bool has_block(const std::string& name) const;

 private:
  std::vector<ParameterBlock> blocks_;
  Index total_ = 0;
};

struct ParameterVector {
  VectorXd values;
  ParameterBlocks blocks;

  Eigen::VectorBlock<const VectorXd> block(const std::string& name) const {
    const auto& b = blocks.block(name);
    return values.segment(b.offset, b.size);
  }
};

// Result of one M-estimation fit. Variance matrices are absent when the fit
// did not converge or when the estimator reports point estimates only.
struct FitResult {
  ParameterVector theta;
  std::optional<MatrixXd> vcov_uc;
  std::optional<MatrixXd> vcov_bc;
  bool converged = false;
  int iterations = 0;
  double max_residual = 0.0;
  double bread_condition = 0.0;
};

}  // namespace csme
