#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "normlab/data.hpp"
#include "normlab/model.hpp"

namespace normlab {

/// Argmax predictions of a [N,k] score tensor; ties go to the lower index.
std::vector<int> predictions(const Tensor& scores);

/// Eval-mode class probabilities, computed in fixed-size chunks.
Tensor predict_probs(Model& model, const Tensor& images);

/// Percentage of misclassified samples (Eval mode).
double error_rate(Model& model, const Dataset& data);
double error_rate(const Tensor& scores, const std::vector<int>& labels);

struct CorruptionCell {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 1;
  double error = 0.0;
};

struct CorruptionReport {
  double clean_error = 0.0;
  std::vector<CorruptionCell> cells;
  double mce = 0.0;  // arithmetic mean of cells[].error
};

CorruptionReport mean_corruption_error(Model& model, const Dataset& clean,
                                       const std::vector<CorruptionKind>& kinds,
                                       const std::vector<int>& severities, std::uint64_t seed);

/// Copy of `model` whose BN running statistics are blended towards the
/// statistics observed on `batch` (blend 1 = full replacement). The source is
/// never modified.
Model adapt_bn_statistics(const Model& model, const Tensor& batch, double blend = 1.0);

enum class AdaptScenarioKind { AdaptOneTestOne, AdaptOneTestAll, AdaptAllTestAll };
const char* scenario_name(AdaptScenarioKind kind);

struct AdaptScenario {
  AdaptScenarioKind kind = AdaptScenarioKind::AdaptOneTestOne;
  std::size_t adapt_batch_size = 64;
  int severity = 3;
  double blend = 1.0;
  std::uint64_t seed = 0;
};

struct AdaptScenarioResult {
  AdaptScenarioKind kind = AdaptScenarioKind::AdaptOneTestOne;
  std::optional<CorruptionKind> adapted_on;  // AdaptOneTestAll: the sampled kind
  std::vector<CorruptionCell> cells;          // one per tested kind
  double mean_error = 0.0;
};

/// Adaptation batches are drawn from `pool`; errors are measured on corrupted
/// copies of `test` at the scenario severity.
AdaptScenarioResult run_adapt_scenario(const Model& model, const Dataset& pool, const Dataset& test,
                                       const AdaptScenario& scenario,
                                       const std::vector<CorruptionKind>& kinds = {
                                           kAllCorruptions.begin(), kAllCorruptions.end()});

/// Mean over samples of the share of input-gradient saliency falling inside
/// `region` (a per-pixel mask over H*W, or over D for flat inputs).
double saliency_reliance(const Model& model, const Dataset& data, const std::vector<std::uint8_t>& region);

struct CalibrationReport {
  double rms_cal_err = 0.0;
  double ma_cal_err = 0.0;
  double miscalibration_area = 0.0;
  double sharpness = 0.0;
  double crps = 0.0;
};

inline constexpr std::size_t kCalibrationBins = 15;

CalibrationReport calibration_metrics(const Tensor& probs, const std::vector<int>& labels);

struct AdversarialCalibration {
  std::vector<double> group_fractions;
  std::vector<double> worst_rms;  // per fraction, worst over the sampled groups
};

/// Worst-case rms calibration error over `groups` random subsets for each
/// subset fraction.
AdversarialCalibration adversarial_calibration(const Tensor& probs, const std::vector<int>& labels,
                                               std::uint64_t seed,
                                               const std::vector<double>& fractions = {0.11, 0.56, 1.0},
                                               std::size_t groups = 10);

inline constexpr std::size_t kHistogramBins = 101;

/// CSV `layer,epoch,bin,lo,hi,count` for the Conv/Dense weights of every
/// (epoch, model) snapshot. Each layer gets a symmetric range fit to its
/// largest |weight| across all snapshots, so edges agree between epochs.
std::string export_weight_histograms(const std::vector<std::pair<std::size_t, const Model*>>& trace);

}  // namespace normlab
