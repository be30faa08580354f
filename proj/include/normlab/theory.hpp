#pragma once

// Minimum-norm and max-margin estimators with and without feature
// normalization, in the overparameterized linear setting.

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace normlab::theory {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Singular values below this fraction of the largest are treated as zero.
inline constexpr double kRankTolerance = 1e-10;
/// Smallest admissible feature scale U_ii.
inline constexpr double kMinScale = 1e-8;

struct MinNormProblem {
  Matrix X;                 // n x d
  Vector Y;                 // n
  std::optional<Vector> U;  // diagonal of U (feature standard deviations), length d
};

enum class EstimatorKind { Unnormalized, Normalized, MaxMargin, NormalizedMaxMargin };

struct Diagnostics {
  double residual_norm = 0.0;  // ||X theta - Y|| for regression
  double min_margin = 0.0;     // min_i y_i x_i^T theta for classification
  double max_violation = 0.0;  // max(0, 1 - min_margin)
  std::size_t rank = 0;
  int iterations = 0;
};

struct Estimator {
  Vector theta;
  EstimatorKind kind = EstimatorKind::Unnormalized;
  Diagnostics diagnostics;
  Vector dual;  // max-margin only: multipliers alpha_i >= 0
};

/// Numerical rank of X (singular values above kRankTolerance * sigma_max).
std::size_t numerical_rank(const Matrix& X);

/// zeta = argmin ||zeta|| s.t. X zeta = Y, via column-pivoted QR of X^T.
/// Throws if X does not have full row rank.
Estimator min_norm_solve(const MinNormProblem& p);

/// Same, but accepts rank-deficient X provided the system is consistent
/// (used for the centered system, whose rank is at most n-1).
Estimator min_norm_solve_consistent(const Matrix& X, const Vector& Y);

/// theta = argmin ||U theta|| s.t. X theta = Y, computed as U^-1 beta with
/// beta the min-norm solution of (X U^-1) beta = Y.
Estimator normalized_min_norm_solve(const MinNormProblem& p);

/// The same estimator through its stationarity conditions:
/// theta = U^-2 X^T lambda with (X U^-2 X^T) lambda = Y.
Vector weighted_min_norm_direct(const Matrix& X, const Vector& Y, const Vector& U);

/// Pi = X^T (X X^T)^-1 X, the projector onto the row space of X.
Matrix projection_matrix(const Matrix& X);

struct ProjectionReport {
  double row_space_gap = 0.0;    // ||Pi theta - Pi zeta||
  double null_space_gap = 0.0;   // ||(I - Pi)(theta - zeta)||
  double idempotence_error = 0.0;  // ||Pi^2 - Pi||_F
  double symmetry_error = 0.0;     // ||Pi - Pi^T||_F
};
ProjectionReport check_projection_identity(const Vector& zeta, const Vector& theta,
                                           const Matrix& X);

struct MaxMarginOptions {
  int max_sweeps = 2'000'000;
  double kkt_tolerance = 1e-13;
};

/// argmin ||U theta||^2 s.t. y_i x_i^T theta >= 1. Y entries must be +-1.
/// Solved by coordinate ascent on the dual box QP, then polished by an exact
/// solve on the detected active set.
Estimator max_margin_solve(const Matrix& X, const Vector& Y, const std::optional<Vector>& U = {},
                           const MaxMarginOptions& opts = {});

struct KktReport {
  double min_margin = 0.0;
  double stationarity_residual = 0.0;  // || U^2 theta - sum_active c_i y_i x_i ||, c >= 0
  double min_coefficient = 0.0;
  std::size_t active = 0;
  double active_fraction = 0.0;
};

/// Independent check of a max-margin solution: finds nonnegative multipliers
/// on the constraints active within `active_tol` by NNLS.
KktReport max_margin_kkt(const Matrix& X, const Vector& Y, const std::optional<Vector>& U,
                         const Vector& theta, double active_tol = 1e-4);

/// Lawson-Hanson nonnegative least squares: argmin ||A c - b||, c >= 0.
Vector nnls(const Matrix& A, const Vector& b, int max_iterations = 1000);

struct CenteringReport {
  Vector zeta;   // min-norm solution of X zeta = Y
  Vector theta;  // min-norm solution of (X - mu_X) theta = Y - mu_Y
  Vector mu_x;
  double mu_y = 0.0;
  double in_sample_gap = 0.0;   // max_i |x_i zeta - ((x_i - mu_X) theta + mu_Y)|
  double parameter_gap = 0.0;   // ||theta - zeta||
  double off_sample_gap = 0.0;  // same as in-sample but over probe rows
};
CenteringReport centering_analysis(const Matrix& X, const Vector& Y, const Matrix& probes);

/// Population (divide-by-n) standard deviation of each column; throws if any
/// falls below kMinScale.
Vector feature_scales(const Matrix& X);

/// mean |theta| over the first `low_count` coordinates divided by mean |theta|
/// over the rest.
double weight_ratio(const Vector& theta, std::size_t low_count);

struct VarianceBiasConfig {
  std::vector<std::uint64_t> seeds;
  std::size_t n = 20;
  std::size_t d = 100;
  std::size_t low_var_count = 50;
  double sigma_low = 0.1;
  double sigma_high = 1.0;
};

struct VarianceBiasRow {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t d = 0;
  double sigma_low = 0.0;
  double sigma_high = 0.0;
  double r_unnorm = 0.0;
  double r_norm = 0.0;
  double residual_unnorm = 0.0;
  double residual_norm = 0.0;
};

struct VarianceBiasSummary {
  std::vector<VarianceBiasRow> rows;
  double median_r_unnorm = 0.0;
  double median_r_norm = 0.0;
};

/// Per seed: X has `low_var_count` columns of std sigma_low and the rest of
/// std sigma_high, Y = X theta* for a standard-normal theta*, and U holds the
/// generating standard deviations. Seeds are solved in parallel.
VarianceBiasSummary variance_bias_statistic(const VarianceBiasConfig& cfg);

/// One-row instance X = 1^T, Y = 1 with grouped scales; returns
/// r(theta_norm) / r(zeta), which equals (sigma_high / sigma_low)^2.
double analytic_ratio_gain(double sigma_low, double sigma_high, std::size_t low_count,
                           std::size_t d);

std::string variance_bias_csv(const std::vector<VarianceBiasRow>& rows);

double median(std::vector<double> values);

}  // namespace normlab::theory
