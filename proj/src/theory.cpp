#include "normlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

namespace normlab::theory {

namespace {

struct RowSpaceFactor {
  Eigen::ColPivHouseholderQR<Matrix> qr;  // of X^T
  std::size_t rank = 0;
};

RowSpaceFactor factor_rows(const Matrix& X) {
  RowSpaceFactor f{Eigen::ColPivHouseholderQR<Matrix>(X.transpose()), 0};
  const Eigen::Index n = X.rows();
  const Eigen::Index k = std::min(X.rows(), X.cols());
  Matrix R = f.qr.matrixQR().topLeftCorner(k, n).triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<Matrix> svd(R);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > kRankTolerance * smax && s(i) > 0.0) ++f.rank;
  return f;
}

// Min-norm solution restricted to the leading `rank` pivoted rows.
Vector solve_rows(const RowSpaceFactor& f, const Vector& Y, Eigen::Index d) {
  const auto r = static_cast<Eigen::Index>(f.rank);
  Vector py = f.qr.colsPermutation().transpose() * Y;
  Matrix R11 = f.qr.matrixQR().topLeftCorner(r, r).triangularView<Eigen::Upper>();
  Vector z = R11.transpose().triangularView<Eigen::Lower>().solve(py.head(r));
  Matrix Q = f.qr.householderQ() * Matrix::Identity(d, r);
  return Q * z;
}

void check_problem(const Matrix& X, const Vector& Y, const char* op) {
  if (X.rows() == 0 || X.cols() == 0)
    throw Error(std::string(op) + ": empty design matrix");
  if (Y.size() != X.rows())
    throw Error(std::string(op) + ": X has " + std::to_string(X.rows()) + " rows but Y has " +
                std::to_string(Y.size()) + " entries");
}

const Vector& checked_scales(const std::optional<Vector>& U, Eigen::Index d, const char* op) {
  if (!U) throw Error(std::string(op) + ": feature scales U are required");
  if (U->size() != d)
    throw Error(std::string(op) + ": U has " + std::to_string(U->size()) + " entries, X has " +
                std::to_string(d) + " columns");
  for (Eigen::Index i = 0; i < d; ++i)
    if (!((*U)(i) > kMinScale))
      throw Error(std::string(op) + ": feature scale U[" + std::to_string(i) + "] = " +
                  std::to_string((*U)(i)) + " is not above " + std::to_string(kMinScale));
  return *U;
}

}  // namespace

std::size_t numerical_rank(const Matrix& X) { return factor_rows(X).rank; }

Estimator min_norm_solve(const MinNormProblem& p) {
  check_problem(p.X, p.Y, "min_norm_solve");
  auto f = factor_rows(p.X);
  if (f.rank < static_cast<std::size_t>(p.X.rows()))
    throw Error("min_norm_solve: X is rank-deficient (numerical rank " + std::to_string(f.rank) +
                " < n = " + std::to_string(p.X.rows()) + ")");
  Estimator e;
  e.kind = EstimatorKind::Unnormalized;
  e.theta = solve_rows(f, p.Y, p.X.cols());
  e.diagnostics.rank = f.rank;
  e.diagnostics.residual_norm = (p.X * e.theta - p.Y).norm();
  return e;
}

Estimator min_norm_solve_consistent(const Matrix& X, const Vector& Y) {
  check_problem(X, Y, "min_norm_solve");
  auto f = factor_rows(X);
  if (f.rank == 0) throw Error("min_norm_solve: X has numerical rank 0");
  Estimator e;
  e.kind = EstimatorKind::Unnormalized;
  e.theta = solve_rows(f, Y, X.cols());
  e.diagnostics.rank = f.rank;
  e.diagnostics.residual_norm = (X * e.theta - Y).norm();
  return e;
}

Estimator normalized_min_norm_solve(const MinNormProblem& p) {
  check_problem(p.X, p.Y, "normalized_min_norm_solve");
  const Vector& u = checked_scales(p.U, p.X.cols(), "normalized_min_norm_solve");
  const Vector inv = u.cwiseInverse();
  Estimator beta = min_norm_solve({p.X * inv.asDiagonal(), p.Y, std::nullopt});
  Estimator e;
  e.kind = EstimatorKind::Normalized;
  e.theta = inv.asDiagonal() * beta.theta;
  e.diagnostics.rank = beta.diagnostics.rank;
  e.diagnostics.residual_norm = (p.X * e.theta - p.Y).norm();
  return e;
}

Vector weighted_min_norm_direct(const Matrix& X, const Vector& Y, const Vector& U) {
  check_problem(X, Y, "weighted_min_norm_direct");
  const Vector w = checked_scales(U, X.cols(), "weighted_min_norm_direct").array().square().inverse();
  const Matrix XW = X * w.asDiagonal();
  const Matrix gram = XW * X.transpose();
  Eigen::ColPivHouseholderQR<Matrix> qr(gram);
  const Vector lambda = qr.solve(Y);
  return XW.transpose() * lambda;
}

Matrix projection_matrix(const Matrix& X) {
  auto f = factor_rows(X);
  if (f.rank < static_cast<std::size_t>(X.rows()))
    throw Error("projection_matrix: X is rank-deficient (numerical rank " +
                std::to_string(f.rank) + " < n = " + std::to_string(X.rows()) + ")");
  const Matrix Q = f.qr.householderQ() * Matrix::Identity(X.cols(), static_cast<Eigen::Index>(f.rank));
  return Q * Q.transpose();
}

ProjectionReport check_projection_identity(const Vector& zeta, const Vector& theta,
                                           const Matrix& X) {
  const Matrix P = projection_matrix(X);
  const Vector diff = theta - zeta;
  ProjectionReport r;
  r.row_space_gap = (P * diff).norm();
  r.null_space_gap = (diff - P * diff).norm();
  r.idempotence_error = (P * P - P).norm();
  r.symmetry_error = (P - P.transpose()).norm();
  return r;
}

// ---------------------------------------------------------------------------

Estimator max_margin_solve(const Matrix& X, const Vector& Y, const std::optional<Vector>& U,
                           const MaxMarginOptions& opts) {
  check_problem(X, Y, "max_margin_solve");
  for (Eigen::Index i = 0; i < Y.size(); ++i)
    if (Y(i) != 1.0 && Y(i) != -1.0)
      throw Error("max_margin_solve: labels must be +1 or -1, got " + std::to_string(Y(i)));
  const Eigen::Index n = X.rows();
  Vector inv = Vector::Ones(X.cols());
  if (U) inv = checked_scales(U, X.cols(), "max_margin_solve").cwiseInverse();
  // In beta = U theta coordinates: min ||beta||^2 s.t. A beta >= 1.
  const Matrix A = Y.asDiagonal() * X * inv.asDiagonal();
  const Matrix G = A * A.transpose();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(G(i, i) > 0.0))
      throw Error("max_margin_solve: sample " + std::to_string(i) + " is the zero vector");

  Vector alpha = Vector::Zero(n);
  Vector galpha = Vector::Zero(n);
  auto kkt_violation = [&]() {
    double v = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double grad = 1.0 - galpha(i);
      v = std::max(v, alpha(i) > 0.0 ? std::abs(grad) : std::max(0.0, grad));
    }
    return v;
  };
  int sweep = 0;
  double violation = kkt_violation();
  for (; sweep < opts.max_sweeps && violation > opts.kkt_tolerance; ++sweep) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double next = std::max(0.0, alpha(i) + (1.0 - galpha(i)) / G(i, i));
      const double delta = next - alpha(i);
      if (delta != 0.0) {
        alpha(i) = next;
        galpha += delta * G.col(i);
      }
    }
    if (sweep % 16 == 15) galpha = G * alpha;  // limit drift of the running product
    violation = kkt_violation();
  }
  if (violation > 1e-6)
    throw Error("max_margin_solve: no convergence after " + std::to_string(sweep) +
                " sweeps, final KKT violation " + std::to_string(violation));

  Vector beta = A.transpose() * alpha;

  // Exact polish on the detected support.
  std::vector<Eigen::Index> support;
  for (Eigen::Index i = 0; i < n; ++i)
    if (alpha(i) > 0.0) support.push_back(i);
  if (!support.empty()) {
    const auto s = static_cast<Eigen::Index>(support.size());
    Matrix As(s, A.cols());
    for (Eigen::Index j = 0; j < s; ++j) As.row(j) = A.row(support[static_cast<std::size_t>(j)]);
    try {
      const Estimator polished = min_norm_solve_consistent(As, Vector::Ones(s));
      const Vector margins = A * polished.theta;
      const Vector mult = Eigen::ColPivHouseholderQR<Matrix>(As * As.transpose()).solve(Vector::Ones(s));
      if (margins.minCoeff() >= 1.0 - 1e-12 && mult.minCoeff() >= -1e-12 &&
          polished.diagnostics.residual_norm <= 1e-10 * std::sqrt(static_cast<double>(s))) {
        beta = polished.theta;
        alpha.setZero();
        for (Eigen::Index j = 0; j < s; ++j)
          alpha(support[static_cast<std::size_t>(j)]) = std::max(0.0, mult(j));
      }
    } catch (const Error&) {
      // keep the coordinate-ascent iterate
    }
  }
  const double m = (A * beta).minCoeff();
  if (m < 1.0 && m > 0.0) beta /= m;  // restore exact feasibility

  Estimator e;
  e.kind = U ? EstimatorKind::NormalizedMaxMargin : EstimatorKind::MaxMargin;
  e.theta = inv.asDiagonal() * beta;
  e.dual = alpha;
  e.diagnostics.iterations = sweep;
  e.diagnostics.min_margin = (A * beta).minCoeff();
  e.diagnostics.max_violation = std::max(0.0, 1.0 - e.diagnostics.min_margin);
  e.diagnostics.rank = numerical_rank(X);
  return e;
}

Vector nnls(const Matrix& A, const Vector& b, int max_iterations) {
  const Eigen::Index m = A.cols();
  Vector c = Vector::Zero(m);
  std::vector<bool> passive(static_cast<std::size_t>(m), false);
  const double tol = 1e-12 * std::max(1.0, A.norm() * b.norm());
  auto solve_passive = [&]() {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < m; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    Matrix Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) Ap.col(static_cast<Eigen::Index>(j)) = A.col(idx[j]);
    const Vector sp = Eigen::ColPivHouseholderQR<Matrix>(Ap).solve(b);
    Vector s = Vector::Zero(m);
    for (std::size_t j = 0; j < idx.size(); ++j) s(idx[j]) = sp(static_cast<Eigen::Index>(j));
    return s;
  };
  for (int it = 0; it < max_iterations; ++it) {
    const Vector w = A.transpose() * (b - A * c);
    Eigen::Index t = -1;
    double best = tol;
    for (Eigen::Index j = 0; j < m; ++j)
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best) {
        best = w(j);
        t = j;
      }
    if (t < 0) break;
    passive[static_cast<std::size_t>(t)] = true;
    for (int inner = 0; inner < max_iterations; ++inner) {
      Vector s = solve_passive();
      bool ok = true;
      for (Eigen::Index j = 0; j < m; ++j)
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0) ok = false;
      if (ok) {
        c = s;
        break;
      }
      double step = 1.0;
      for (Eigen::Index j = 0; j < m; ++j)
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0)
          step = std::min(step, c(j) / (c(j) - s(j)));
      c += step * (s - c);
      for (Eigen::Index j = 0; j < m; ++j)
        if (passive[static_cast<std::size_t>(j)] && c(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          c(j) = 0.0;
        }
    }
  }
  return c;
}

KktReport max_margin_kkt(const Matrix& X, const Vector& Y, const std::optional<Vector>& U,
                         const Vector& theta, double active_tol) {
  check_problem(X, Y, "max_margin_kkt");
  const Vector margins = Y.asDiagonal() * (X * theta);
  KktReport r;
  r.min_margin = margins.minCoeff();
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < margins.size(); ++i)
    if (margins(i) <= 1.0 + active_tol) active.push_back(i);
  r.active = active.size();
  r.active_fraction = static_cast<double>(active.size()) / static_cast<double>(margins.size());
  Vector target = theta;
  if (U) target = U->array().square().matrix().asDiagonal() * theta;
  Matrix M(X.cols(), static_cast<Eigen::Index>(active.size()));
  for (std::size_t j = 0; j < active.size(); ++j)
    M.col(static_cast<Eigen::Index>(j)) = Y(active[j]) * X.row(active[j]).transpose();
  if (active.empty()) {
    r.stationarity_residual = target.norm();
    return r;
  }
  const Vector c = nnls(M, target);
  r.stationarity_residual = (M * c - target).norm();
  r.min_coefficient = c.minCoeff();
  return r;
}

// ---------------------------------------------------------------------------

CenteringReport centering_analysis(const Matrix& X, const Vector& Y, const Matrix& probes) {
  check_problem(X, Y, "centering_analysis");
  if (X.rows() < 2) throw Error("centering_analysis: needs at least 2 samples");
  if (probes.size() && probes.cols() != X.cols())
    throw Error("centering_analysis: probe rows have " + std::to_string(probes.cols()) +
                " features, X has " + std::to_string(X.cols()));
  CenteringReport r;
  r.mu_x = X.colwise().mean().transpose();
  r.mu_y = Y.mean();
  const Matrix Xc = X.rowwise() - r.mu_x.transpose();
  const Vector Yc = Y.array() - r.mu_y;
  if (numerical_rank(Xc) == 0) throw Error("centering_analysis: centered matrix has rank 0");
  r.zeta = min_norm_solve_consistent(X, Y).theta;
  r.theta = min_norm_solve_consistent(Xc, Yc).theta;
  auto gap = [&](const Matrix& pts) {
    if (pts.rows() == 0) return 0.0;
    const Vector a = pts * r.zeta;
    const Vector b = ((pts.rowwise() - r.mu_x.transpose()) * r.theta).array() + r.mu_y;
    return (a - b).cwiseAbs().maxCoeff();
  };
  r.in_sample_gap = gap(X);
  r.parameter_gap = (r.theta - r.zeta).norm();
  r.off_sample_gap = gap(probes);
  return r;
}

Vector feature_scales(const Matrix& X) {
  const Vector mu = X.colwise().mean().transpose();
  const Matrix c = X.rowwise() - mu.transpose();
  Vector s = (c.colwise().squaredNorm() / static_cast<double>(X.rows())).cwiseSqrt().transpose();
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) < kMinScale)
      throw Error("feature_scales: feature " + std::to_string(i) + " has standard deviation " +
                  std::to_string(s(i)) + " below " + std::to_string(kMinScale));
  return s;
}

double weight_ratio(const Vector& theta, std::size_t low_count) {
  const auto lc = static_cast<Eigen::Index>(low_count);
  if (lc == 0 || lc >= theta.size())
    throw Error("weight_ratio: low-variance group must be a proper non-empty prefix");
  const double low = theta.head(lc).cwiseAbs().mean();
  const double high = theta.tail(theta.size() - lc).cwiseAbs().mean();
  return low / high;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

VarianceBiasSummary variance_bias_statistic(const VarianceBiasConfig& cfg) {
  if (!(cfg.sigma_low > 0.0) || !(cfg.sigma_high > 0.0))
    throw Error("variance_bias_statistic: degenerate variance (sigma must be > 0)");
  if (cfg.sigma_low > cfg.sigma_high)
    throw Error("variance_bias_statistic: sigma_low must not exceed sigma_high");
  if (cfg.d <= cfg.n) throw Error("variance_bias_statistic: needs d > n");
  if (cfg.low_var_count == 0 || cfg.low_var_count >= cfg.d)
    throw Error("variance_bias_statistic: low_var_count must be in [1, d)");
  if (cfg.seeds.empty()) throw Error("variance_bias_statistic: no seeds");

  const auto n = static_cast<Eigen::Index>(cfg.n), d = static_cast<Eigen::Index>(cfg.d);
  const auto lc = static_cast<Eigen::Index>(cfg.low_var_count);
  Vector scales(d);
  scales.head(lc).setConstant(cfg.sigma_low);
  scales.tail(d - lc).setConstant(cfg.sigma_high);

  VarianceBiasSummary out;
  out.rows.resize(cfg.seeds.size());
  const long count = static_cast<long>(cfg.seeds.size());
#pragma omp parallel for schedule(static)
  for (long s = 0; s < count; ++s) {
    const auto seed = cfg.seeds[static_cast<std::size_t>(s)];
    Rng rng(derive_seed(seed, "variance_bias"));
    Matrix X(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rng.normal(0.0, scales(j));
    Vector truth(d);
    for (Eigen::Index j = 0; j < d; ++j) truth(j) = rng.normal();
    const Vector Y = X * truth;
    const auto zeta = min_norm_solve({X, Y, std::nullopt});
    const auto theta = normalized_min_norm_solve({X, Y, scales});
    auto& row = out.rows[static_cast<std::size_t>(s)];
    row = {seed,
           cfg.n,
           cfg.d,
           cfg.sigma_low,
           cfg.sigma_high,
           weight_ratio(zeta.theta, cfg.low_var_count),
           weight_ratio(theta.theta, cfg.low_var_count),
           zeta.diagnostics.residual_norm,
           theta.diagnostics.residual_norm};
  }
  std::vector<double> ru, rn;
  for (const auto& r : out.rows) {
    ru.push_back(r.r_unnorm);
    rn.push_back(r.r_norm);
  }
  out.median_r_unnorm = median(ru);
  out.median_r_norm = median(rn);
  return out;
}

double analytic_ratio_gain(double sigma_low, double sigma_high, std::size_t low_count,
                           std::size_t d) {
  const auto dd = static_cast<Eigen::Index>(d), lc = static_cast<Eigen::Index>(low_count);
  Matrix X = Matrix::Ones(1, dd);
  Vector Y = Vector::Ones(1);
  Vector U(dd);
  U.head(lc).setConstant(sigma_low);
  U.tail(dd - lc).setConstant(sigma_high);
  const auto zeta = min_norm_solve({X, Y, std::nullopt});
  const auto theta = normalized_min_norm_solve({X, Y, U});
  return weight_ratio(theta.theta, low_count) / weight_ratio(zeta.theta, low_count);
}

std::string variance_bias_csv(const std::vector<VarianceBiasRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "seed,n,d,sigma_low,sigma_high,r_unnorm,r_norm,residual_unnorm,residual_norm\n";
  for (const auto& r : rows)
    os << r.seed << ',' << r.n << ',' << r.d << ',' << r.sigma_low << ',' << r.sigma_high << ','
       << r.r_unnorm << ',' << r.r_norm << ',' << r.residual_unnorm << ',' << r.residual_norm
       << '\n';
  return os.str();
}

}  // namespace normlab::theory
