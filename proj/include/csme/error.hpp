#pragma once

#include <stdexcept>
#include <string>

namespace csme {

// Bad arguments or incompatible shapes supplied by the caller.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DimensionError : ArgumentError {
  using ArgumentError::ArgumentError;
};

// Problems with ingested data (missing values, bad CSV cells, empty strata).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotPsdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values produced where finite ones are required.
struct NumericDomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exponential overflow guard tripped (|Re| > 700 under an exp-based link or weight).
struct OverflowError : NumericDomainError {
  using NumericDomainError::NumericDomainError;
};

// The corrected-score integral does not exist for the given propensity/error variances.
struct DivergentCorrectionError : NumericDomainError {
  using NumericDomainError::NumericDomainError;
};

// Sandwich bread matrix is singular; carries the estimated condition number.
struct VarianceError : std::runtime_error {
  explicit VarianceError(const std::string& what, double condition)
      : std::runtime_error(what), condition_number(condition) {}
  double condition_number;
};

// Assumed measurement-error variance exceeds the observed residual variance.
struct InfeasibleVarianceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Estimator request is internally inconsistent (e.g. mismatched links for DR).
struct SpecificationError : ArgumentError {
  using ArgumentError::ArgumentError;
};

struct CollinearityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InsufficientReplicatesError : DataError {
  using DataError::DataError;
};

struct DegenerateStratumError : DataError {
  using DataError::DataError;
};

// A SIMEX refit failed; message names the (lambda, replicate) cell.
struct SimexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace csme
