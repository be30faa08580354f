#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "normlab/metrics.hpp"
#include "normlab/rng.hpp"
#include "support.hpp"

using namespace normlab;

namespace {

Dataset small_images(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.images = Tensor({n, 3, 8, 8});
  Rng rng(seed);
  for (auto& v : d.images.data()) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 2));
  return d;
}

Model trained_like_model(std::uint64_t seed) {
  auto m = Model::build(appendix_cnn(3, 8, 8, 2), seed);
  m.infer(small_images(16, seed + 1).images, Mode::Train);  // non-trivial running statistics
  return m;
}

}  // namespace

TEST(Predictions, ArgmaxWithLowerIndexTieBreak) {
  Tensor s({3, 3}, {0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 1, 1, 1});
  EXPECT_EQ(predictions(s), (std::vector<int>{1, 0, 0}));
  EXPECT_NEAR(error_rate(s, {1, 1, 0}), 100.0 / 3.0, 1e-12);
  EXPECT_THROW(error_rate(Tensor(Shape{0, 2}), {}), Error);
  EXPECT_THROW(error_rate(s, {1, 1}), Error);
}

TEST(Calibration, OneHotCorrectPredictionsAreExactlyZero) {
  Tensor p({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0});
  const auto r = calibration_metrics(p, {0, 1, 2, 0});
  EXPECT_EQ(r.rms_cal_err, 0.0);
  EXPECT_EQ(r.ma_cal_err, 0.0);
  EXPECT_EQ(r.miscalibration_area, 0.0);
  EXPECT_EQ(r.crps, 0.0);
  EXPECT_EQ(r.sharpness, 0.0);
}

TEST(Calibration, HandComputedValues) {
  // Bins: confidence 0.9 correct, confidence 0.6 wrong.
  Tensor p({2, 2}, {0.9, 0.1, 0.6, 0.4});
  const auto r = calibration_metrics(p, {0, 1});
  EXPECT_NEAR(r.ma_cal_err, 0.5 * 0.1 + 0.5 * 0.6, 1e-15);
  EXPECT_NEAR(r.rms_cal_err, std::sqrt(0.5 * 0.01 + 0.5 * 0.36), 1e-15);
  // Curve (0.5,0.5) -> (0.6,0) -> (0.9,1) -> (1,1); the middle segment crosses the diagonal.
  EXPECT_NEAR(r.miscalibration_area, 0.1 * 0.6 / 2 + 0.3 * (0.36 + 0.01) / (2 * 0.7) + 0.1 * 0.1 / 2, 1e-15);

  Tensor q({1, 3}, {0.2, 0.5, 0.3});
  const auto s = calibration_metrics(q, {1});
  EXPECT_NEAR(s.crps, 0.04 + 0.09, 1e-15);
  EXPECT_NEAR(s.sharpness, 1.7 - 1.1 * 1.1, 1e-15);
}

TEST(Calibration, OverconfidentSingleBinHasArea) {
  // Every sample at confidence 0.99 with half of them wrong.
  Tensor p({4, 2}, {0.99, 0.01, 0.99, 0.01, 0.99, 0.01, 0.99, 0.01});
  const auto r = calibration_metrics(p, {0, 1, 0, 1});
  // (0.5,0.5) -> (0.99,0.5) -> (1,1)
  EXPECT_NEAR(r.miscalibration_area, 0.49 * 0.49 / 2 + 0.01 * (0.49 + 0.0) / 2, 1e-12);
}

TEST(Calibration, PerfectlyCalibratedGeneratorHasSmallArea) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Tensor p;
    std::vector<int> y;
    testkit::calibrated_sample(seed, 10000, 4, p, y);
    const auto r = calibration_metrics(p, y);
    EXPECT_LE(r.miscalibration_area, 0.02);
    EXPECT_LE(r.ma_cal_err, r.rms_cal_err);
  }
}

TEST(Calibration, MeanAbsoluteNeverExceedsRms) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.integer(0, 200));
    Tensor p({n, 3});
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < 3; ++j) z += p.data()[i * 3 + j] = rng.uniform();
      for (std::size_t j = 0; j < 3; ++j) p.data()[i * 3 + j] /= z;
      y[i] = static_cast<int>(rng.integer(0, 2));
    }
    const auto r = calibration_metrics(p, y);
    EXPECT_LE(r.ma_cal_err, r.rms_cal_err + 1e-15);
    EXPECT_GE(r.miscalibration_area, 0.0);
  }
}

TEST(Calibration, RejectsInvalidProbabilities) {
  EXPECT_THROW(calibration_metrics(Tensor({1, 2}, {0.7, 0.7}), {0}), Error);
  EXPECT_THROW(calibration_metrics(Tensor({1, 2}, {1.5, -0.5}), {0}), Error);
  EXPECT_THROW(calibration_metrics(Tensor({1, 2}, {0.5, 0.5}), {2}), Error);
  EXPECT_THROW(calibration_metrics(Tensor(Shape{0, 2}), {}), Error);
}

TEST(Calibration, AdversarialGroupsBoundedByWorstCase) {
  Tensor p;
  std::vector<int> y;
  testkit::calibrated_sample(7, 2000, 3, p, y);
  const auto full = calibration_metrics(p, y);
  const auto adv = adversarial_calibration(p, y, 1);
  ASSERT_EQ(adv.worst_rms.size(), 3u);
  EXPECT_NEAR(adv.worst_rms[2], full.rms_cal_err, 1e-12);  // every group is the whole set
  EXPECT_GE(adv.worst_rms[0], adv.worst_rms[2] - 1e-12);   // small groups are noisier
  const auto again = adversarial_calibration(p, y, 1);
  EXPECT_EQ(adv.worst_rms, again.worst_rms);
  EXPECT_THROW(adversarial_calibration(p, y, 1, {0.0}), Error);
}

TEST(Corruption, MeanCorruptionErrorAveragesCells) {
  auto m = trained_like_model(1);
  const auto data = small_images(12, 2);
  const auto r = mean_corruption_error(m, data, {CorruptionKind::Contrast, CorruptionKind::BoxBlur}, {1, 5}, 3);
  ASSERT_EQ(r.cells.size(), 4u);
  double s = 0;
  for (const auto& c : r.cells) s += c.error;
  EXPECT_NEAR(r.mce, s / 4.0, 1e-12);
  EXPECT_EQ(r.clean_error, error_rate(m, data));
  EXPECT_THROW(mean_corruption_error(m, data, {}, {1}, 3), Error);
}

TEST(Adaptation, SourceModelIsNeverMutated) {
  const auto m = trained_like_model(3);
  const auto h = m.state_hash();
  const auto batch = apply_corruption(small_images(16, 4).images, {CorruptionKind::GaussianNoise, 5}, 1);
  const auto a = adapt_bn_statistics(m, batch);
  EXPECT_EQ(m.state_hash(), h);
  EXPECT_NE(a.state_hash(), h);
  EXPECT_FALSE(a.frozen());
  EXPECT_THROW(adapt_bn_statistics(m, batch, 0.0), Error);
  EXPECT_THROW(adapt_bn_statistics(Model::build(strip_batchnorm(m.spec()), 1), batch), Error);
}

TEST(Adaptation, FullBlendReplacesRunningStatsWithBatchMoments) {
  const auto m = Model::build(mlp(4, {3}, 2), 5);
  Tensor x({6, 4});
  Rng rng(1);
  for (auto& v : x.data()) v = rng.normal();
  const auto a = adapt_bn_statistics(m, x);
  // First BN sees Dense(x) = x W + b; compare against its batch moments.
  const auto& w = m.layers()[0].weight;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> h(6, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 4; ++j) h[i] += x[i * 4 + j] * w[j * 3 + c];
    double mean = 0, var = 0;
    for (double v : h) mean += v / 6;
    for (double v : h) var += (v - mean) * (v - mean) / 6;
    EXPECT_NEAR(a.layers()[1].bn->running_mean[c], mean, 1e-12);
    EXPECT_NEAR(a.layers()[1].bn->running_var[c], var, 1e-12);
  }
}

TEST(Adaptation, ScenarioShapes) {
  const auto m = trained_like_model(6);
  const auto pool = small_images(32, 7), test = small_images(16, 8);
  const auto h = m.state_hash();
  AdaptScenario sc;
  sc.adapt_batch_size = 8;
  sc.seed = 2;
  for (auto kind : {AdaptScenarioKind::AdaptOneTestOne, AdaptScenarioKind::AdaptOneTestAll,
                    AdaptScenarioKind::AdaptAllTestAll}) {
    sc.kind = kind;
    const auto r = run_adapt_scenario(m, pool, test, sc);
    EXPECT_EQ(r.cells.size(), kAllCorruptions.size());
    EXPECT_EQ(r.adapted_on.has_value(), kind == AdaptScenarioKind::AdaptOneTestAll);
    double s = 0;
    for (const auto& c : r.cells) s += c.error;
    EXPECT_NEAR(r.mean_error, s / 5.0, 1e-12);
    const auto again = run_adapt_scenario(m, pool, test, sc);
    EXPECT_EQ(r.mean_error, again.mean_error);
  }
  EXPECT_EQ(m.state_hash(), h);
  EXPECT_STREQ(scenario_name(AdaptScenarioKind::AdaptOneTestAll), "adapt_one_test_all");
}

TEST(Saliency, RelianceIsAShare) {
  const auto m = trained_like_model(9);
  const auto data = small_images(8, 10);
  std::vector<std::uint8_t> none(64, 0), all(64, 1), half(64, 0);
  std::fill(half.begin(), half.begin() + 32, 1);
  EXPECT_THROW(saliency_reliance(m, data, none), Error);
  EXPECT_NEAR(saliency_reliance(m, data, all), 1.0, 1e-12);
  const double r = saliency_reliance(m, data, half);
  EXPECT_GT(r, 0.0);
  EXPECT_LT(r, 1.0);
  EXPECT_THROW(saliency_reliance(m, data, std::vector<std::uint8_t>(10, 1)), Error);
}

TEST(Histograms, CountsCoverEveryWeight) {
  const auto a = Model::build(mlp(4, {3}, 2, false), 1), b = Model::build(mlp(4, {3}, 2, false), 2);
  const auto csv = export_weight_histograms({{0, &a}, {5, &b}});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "layer,epoch,bin,lo,hi,count");
  std::map<std::pair<std::string, std::string>, long> totals;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 6u);
    totals[{f[0], f[1]}] += std::stol(f[5]);
    ++rows;
  }
  EXPECT_EQ(rows, 2 * 2 * kHistogramBins);
  for (const auto& [key, n] : totals) EXPECT_TRUE(n == 12 || n == 6) << key.first;
}
