#include <algorithm>
#include <cmath>

#include "normlab/metrics.hpp"
#include "normlab/rng.hpp"

namespace normlab {

namespace {

void check_probabilities(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw Error("calibration: expected [N,k] probabilities, got " + to_string(probs.shape()));
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (n == 0 || n != labels.size())
    throw Error("calibration: " + std::to_string(n) + " probability rows for " + std::to_string(labels.size()) +
                " labels");
  const auto p = probs.data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = p[i * k + j];
      if (!(v >= -1e-12 && v <= 1.0 + 1e-12))
        throw Error("calibration: row " + std::to_string(i) + " has probability " + std::to_string(v));
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw Error("calibration: row " + std::to_string(i) + " sums to " + std::to_string(s));
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw Error("calibration: label " + std::to_string(labels[i]) + " out of range");
  }
}

// Area between the piecewise-linear reliability curve and the diagonal. The
// curve is pinned to the diagonal at both ends of the confidence range
// [1/k, 1], so a single occupied bin still encloses its gap.
double curve_area(const std::vector<double>& conf, const std::vector<double>& acc) {
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < conf.size(); ++i) {
    const double w = conf[i + 1] - conf[i];
    const double d0 = acc[i] - conf[i], d1 = acc[i + 1] - conf[i + 1];
    if (d0 * d1 >= 0.0) {
      area += w * (std::abs(d0) + std::abs(d1)) / 2.0;
    } else {
      area += w * (d0 * d0 + d1 * d1) / (2.0 * (std::abs(d0) + std::abs(d1)));
    }
  }
  return area;
}

}  // namespace

CalibrationReport calibration_metrics(const Tensor& probs, const std::vector<int>& labels) {
  check_probabilities(probs, labels);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  const auto p = probs.data();
  const auto pred = predictions(probs);

  std::vector<double> bin_conf(kCalibrationBins, 0.0), bin_acc(kCalibrationBins, 0.0);
  std::vector<std::size_t> bin_n(kCalibrationBins, 0);
  CalibrationReport r;
  for (std::size_t i = 0; i < n; ++i) {
    const double conf = p[i * k + static_cast<std::size_t>(pred[i])];
    const auto b = std::min(kCalibrationBins - 1, static_cast<std::size_t>(conf * kCalibrationBins));
    bin_conf[b] += conf;
    bin_acc[b] += pred[i] == labels[i] ? 1.0 : 0.0;
    ++bin_n[b];

    double mean = 0.0, second = 0.0, cdf = 0.0, crps = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = p[i * k + j];
      mean += pj * static_cast<double>(j);
      second += pj * static_cast<double>(j * j);
      cdf += pj;
      const double step = j >= static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0;
      crps += (cdf - step) * (cdf - step);
    }
    r.sharpness += std::max(0.0, second - mean * mean);
    r.crps += crps;
  }
  r.sharpness /= static_cast<double>(n);
  r.crps /= static_cast<double>(n);

  const double lowest = 1.0 / static_cast<double>(k);
  std::vector<double> curve_conf{lowest}, curve_acc{lowest};
  double ma = 0.0, ms = 0.0;
  for (std::size_t b = 0; b < kCalibrationBins; ++b) {
    if (bin_n[b] == 0) continue;
    const double c = bin_conf[b] / static_cast<double>(bin_n[b]);
    const double a = bin_acc[b] / static_cast<double>(bin_n[b]);
    const double w = static_cast<double>(bin_n[b]) / static_cast<double>(n);
    ma += w * std::abs(a - c);
    ms += w * (a - c) * (a - c);
    curve_conf.push_back(c);
    curve_acc.push_back(a);
  }
  r.ma_cal_err = ma;
  r.rms_cal_err = std::sqrt(ms);
  curve_conf.push_back(1.0);
  curve_acc.push_back(1.0);
  r.miscalibration_area = curve_area(curve_conf, curve_acc);
  return r;
}

AdversarialCalibration adversarial_calibration(const Tensor& probs, const std::vector<int>& labels,
                                               std::uint64_t seed, const std::vector<double>& fractions,
                                               std::size_t groups) {
  check_probabilities(probs, labels);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  AdversarialCalibration out;
  for (std::size_t f = 0; f < fractions.size(); ++f) {
    const double frac = fractions[f];
    if (!(frac > 0.0 && frac <= 1.0)) throw Error("adversarial_calibration: group fraction must be in (0,1]");
    const auto size = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frac * static_cast<double>(n))));
    double worst = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
      auto perm = Rng(derive_seed(seed, "adversarial_calibration", f, g)).permutation(n);
      perm.resize(size);
      std::vector<double> sub(size * k);
      std::vector<int> sub_labels(size);
      for (std::size_t i = 0; i < size; ++i) {
        std::copy_n(probs.data().begin() + static_cast<std::ptrdiff_t>(perm[i] * k), k,
                    sub.begin() + static_cast<std::ptrdiff_t>(i * k));
        sub_labels[i] = labels[perm[i]];
      }
      worst = std::max(worst, calibration_metrics(Tensor(Shape{size, k}, std::move(sub)), sub_labels).rms_cal_err);
    }
    out.group_fractions.push_back(frac);
    out.worst_rms.push_back(worst);
  }
  return out;
}

}  // namespace normlab
