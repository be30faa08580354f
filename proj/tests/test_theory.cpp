#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>

#include "normlab/rng.hpp"
#include "normlab/theory.hpp"
#include "support.hpp"

using namespace normlab;
using namespace normlab::theory;

namespace {

Matrix gaussian(std::uint64_t seed, Eigen::Index r, Eigen::Index c) {
  Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

Vector scales(std::uint64_t seed, Eigen::Index d) {
  Rng rng(seed);
  Vector u(d);
  for (auto& v : u) v = std::exp(rng.uniform(std::log(0.2), std::log(5.0)));
  return u;
}

// Oracle: Moore-Penrose pseudoinverse from a full SVD.
Vector pinv_solve(const Matrix& X, const Vector& Y) {
  Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  Vector uty = svd.matrixU().transpose() * Y;
  Vector z = Vector::Zero(X.cols());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > 1e-12 * s(0)) z(i) = uty(i) / s(i);
  return svd.matrixV() * z;
}

}  // namespace

TEST(MinNorm, MatchesPseudoinverse) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix X = gaussian(seed, 6, 15);
    Vector Y = gaussian(seed + 100, 6, 1);
    auto est = min_norm_solve({X, Y, std::nullopt});
    EXPECT_LE((est.theta - pinv_solve(X, Y)).norm(), 1e-10);
    EXPECT_LE(est.diagnostics.residual_norm, 1e-10);
    EXPECT_EQ(est.diagnostics.rank, 6u);
  }
}

TEST(MinNorm, NormalizedMatchesScaledPseudoinverseAndDirectSolve) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix X = gaussian(seed, 5, 12);
    Vector Y = gaussian(seed + 50, 5, 1);
    Vector U = scales(seed + 7, 12);
    auto est = normalized_min_norm_solve({X, Y, U});
    const Matrix Uinv = U.cwiseInverse().asDiagonal();
    EXPECT_LE((est.theta - Uinv * pinv_solve(X * Uinv, Y)).norm(), 1e-10);
    EXPECT_LE((est.theta - weighted_min_norm_direct(X, Y, U)).norm(), 1e-9);
    EXPECT_LE((X * est.theta - Y).norm(), 1e-10);
  }
}

TEST(MinNorm, RejectsRankDeficientAndBadScales) {
  Matrix X(2, 4);
  X << 1, 2, 3, 4, 2, 4, 6, 8;
  Vector Y(2);
  Y << 1, 2;
  EXPECT_THROW(min_norm_solve({X, Y, std::nullopt}), std::exception);
  // consistent rank-deficient system is accepted by the dedicated solver
  EXPECT_LE((X * min_norm_solve_consistent(X, Y).theta - Y).norm(), 1e-10);
  Vector U = Vector::Ones(4);
  U(2) = 0.0;
  EXPECT_THROW(normalized_min_norm_solve({gaussian(1, 2, 4), Y, U}), std::exception);
  EXPECT_THROW(min_norm_solve({gaussian(1, 2, 4), Vector::Ones(3), std::nullopt}), std::exception);
}

TEST(Projection, RowSpaceComponentsAgree) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix X = gaussian(seed, 8, 40);
    Vector Y = gaussian(seed + 1, 8, 1);
    Vector U = scales(seed + 2, 40);
    auto zeta = min_norm_solve({X, Y, std::nullopt}).theta;
    auto theta = normalized_min_norm_solve({X, Y, U}).theta;
    auto r = check_projection_identity(zeta, theta, X);
    EXPECT_LE(r.row_space_gap, 1e-10);
    EXPECT_LE(r.idempotence_error, 1e-10);
    EXPECT_LE(r.symmetry_error, 1e-10);
    EXPECT_GT(r.null_space_gap, 1e-3);  // the estimators differ only off the row space
  }
}

TEST(VarianceBias, AnalyticInstanceGivesSquaredScaleRatio) {
  EXPECT_NEAR(analytic_ratio_gain(0.1, 1.0, 50, 100), 100.0, 1e-6);
  EXPECT_NEAR(analytic_ratio_gain(0.5, 2.0, 3, 10), 16.0, 1e-9);
}

TEST(VarianceBias, NormalizedEstimatorFavoursLowVariance) {
  VarianceBiasConfig cfg;
  for (std::uint64_t s = 0; s < 30; ++s) cfg.seeds.push_back(s);
  auto summary = variance_bias_statistic(cfg);
  ASSERT_EQ(summary.rows.size(), 30u);
  EXPECT_GT(summary.median_r_norm, summary.median_r_unnorm);
  for (const auto& r : summary.rows) {
    EXPECT_LE(r.residual_unnorm, 1e-8);
    EXPECT_LE(r.residual_norm, 1e-8);
  }
  const auto csv = variance_bias_csv(summary.rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31);
}

TEST(MaxMargin, MatchesBruteForceIn2D) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Matrix X;
    Vector Y;
    testkit::separable_instance(seed, 4, 2, X, Y);
    const Vector U = seed % 2 ? scales(seed, 2) : Vector::Ones(2);
    auto est = max_margin_solve(X, Y, U);
    auto oracle = testkit::brute_force_max_margin_2d(X, Y, U);
    ASSERT_EQ(oracle.size(), 2);
    EXPECT_LE((est.theta - oracle).norm(), 1e-6) << "seed " << seed;
  }
}

TEST(MaxMargin, KktHoldsOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix X;
    Vector Y;
    testkit::separable_instance(seed, 3 + seed % 8, 10 + seed % 20, X, Y);
    auto est = max_margin_solve(X, Y);
    auto kkt = max_margin_kkt(X, Y, std::nullopt, est.theta);
    EXPECT_GE(kkt.min_margin, 1.0 - 1e-6);
    EXPECT_LE(kkt.stationarity_residual, 1e-4);
    EXPECT_GE(kkt.active, 1u);
    // dual feasibility and complementary slackness of the solver's own multipliers
    const Vector margins = (X * est.theta).cwiseProduct(Y);
    for (Eigen::Index i = 0; i < Y.size(); ++i) {
      EXPECT_GE(est.dual(i), 0.0);
      EXPECT_LE(est.dual(i) * (margins(i) - 1.0), 1e-6);
    }
  }
}

TEST(MaxMargin, RejectsNonBinaryLabels) {
  Matrix X = gaussian(1, 3, 4);
  Vector Y(3);
  Y << 1, -1, 0.5;
  EXPECT_THROW(max_margin_solve(X, Y), std::exception);
}

TEST(Nnls, MatchesClosedFormCases) {
  Matrix A = Matrix::Identity(3, 3);
  Vector b(3);
  b << 1, -2, 3;
  Vector c = nnls(A, b);
  EXPECT_NEAR(c(0), 1.0, 1e-12);
  EXPECT_NEAR(c(1), 0.0, 1e-12);
  EXPECT_NEAR(c(2), 3.0, 1e-12);
  // unconstrained optimum already nonnegative
  Matrix B = gaussian(3, 6, 3);
  Vector x0(3);
  x0 << 0.5, 1.0, 2.0;
  EXPECT_LE((nnls(B, B * x0) - x0).norm(), 1e-10);
}

TEST(Centering, InSampleAgreement) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix X = gaussian(seed, 10, 30);
    Vector Y = gaussian(seed + 1, 10, 1);
    auto r = centering_analysis(X, Y, gaussian(seed + 2, 20, 30));
    EXPECT_LE(r.in_sample_gap, 1e-8);
    EXPECT_GE(r.off_sample_gap, 0.0);
  }
}

TEST(Helpers, FeatureScalesAndRatio) {
  Matrix X(4, 2);
  X << 1, 5, -1, 5, 1, 5, -1, 5;
  EXPECT_THROW(feature_scales(X), std::exception);  // second column is constant
  X(0, 1) = 6;
  auto u = feature_scales(X);
  EXPECT_NEAR(u(0), 1.0, 1e-15);
  Vector t(4);
  t << 2, -2, 1, 1;
  EXPECT_NEAR(weight_ratio(t, 2), 2.0, 1e-15);
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}
