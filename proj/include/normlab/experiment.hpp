#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "normlab/data.hpp"
#include "normlab/metrics.hpp"
#include "normlab/model.hpp"
#include "normlab/training.hpp"

namespace normlab {

enum class ExperimentKind {
  TheoryMinNorm,
  TheoryMaxMargin,
  TheoryCentering,
  Shortcut,
  CorruptionRobustness,
  BnAdaptation,
  LambdaSweep,
  Calibration,
};

const char* experiment_name(ExperimentKind kind);
std::optional<ExperimentKind> parse_experiment(const std::string& name);

/// Invalid configuration; `path` names the offending field, e.g. "student.optimizer.lr".
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& message)
      : Error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct TheoryConfig {
  // variance-bias statistic
  std::size_t seeds = 200;
  std::size_t n = 20;
  std::size_t d = 100;
  std::size_t low_var_count = 50;
  double sigma_low = 0.1;
  double sigma_high = 1.0;
  // projection identity
  std::size_t projection_instances = 100;
  std::size_t projection_n = 8;
  std::size_t projection_d = 40;
  // max margin
  std::size_t maxmargin_instances = 50;
  std::size_t maxmargin_max_n = 10;
  std::size_t maxmargin_max_d = 30;
  std::vector<std::size_t> support_dims = {12, 24, 48, 96, 192};
  // centering
  std::size_t centering_instances = 100;
  std::size_t centering_n = 10;
  std::size_t centering_d = 30;
  std::size_t centering_probes = 20;
};

struct ModelConfig {
  std::string preset = "appendix_cnn";  // or "mlp"
  std::vector<std::size_t> hidden = {256};  // mlp only
};

struct CorruptionSuiteConfig {
  std::vector<CorruptionKind> kinds = {kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<int> severities = {1, 3, 5};
  std::string test_split = "Both";
};

struct AdaptationConfig {
  std::size_t batch_size = 64;
  int severity = 3;
  double blend = 1.0;
  std::vector<AdaptScenarioKind> scenarios = {AdaptScenarioKind::AdaptOneTestOne,
                                              AdaptScenarioKind::AdaptOneTestAll,
                                              AdaptScenarioKind::AdaptAllTestAll};
};

struct CalibrationConfig {
  std::vector<double> group_fractions = {0.11, 0.56, 1.0};
  std::size_t groups = 10;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::TheoryMinNorm;
  std::uint64_t seed = 0;
  std::size_t replicates = 3;
  std::string output_dir = "runs/out";
  TheoryConfig theory;
  ShortcutDatasetConfig data;  // data.seed is derived per replicate
  ModelConfig model;
  TrainConfig teacher;  // .seed is derived per replicate
  TrainConfig student;  // wBN baseline and CT students
  std::vector<double> lambdas = {0.1, 1.0, 10.0};
  std::size_t histogram_every = 5;  // epochs between weight snapshots (shortcut)
  CorruptionSuiteConfig corruption;
  AdaptationConfig adaptation;
  CalibrationConfig calibration;
};

/// Preset for an experiment: every field holds the value a config file that
/// only names the experiment would resolve to.
ExperimentConfig default_config(ExperimentKind kind);

/// Strict parse: unknown fields, wrong types and out-of-range values raise
/// ConfigError with the field path. Missing fields take preset defaults.
ExperimentConfig parse_config(const std::string& json_text);
/// Full resolved config as pretty JSON; parse_config(to_json(c)) == c.
std::string to_json(const ExperimentConfig& cfg);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

ModelSpec student_spec(const ExperimentConfig& cfg);

struct RunResult {
  std::vector<std::string> files;  // relative to the output directory
  std::string summary_json;        // also written as summary.json
};

/// Runs the configured experiment and writes every output below `out`.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Aligned two-column rendering of a summary JSON document.
std::string render_report(const std::string& json_text);

// ---------------------------------------------------------------------------
// Shared shortcut-task pipeline, exposed for tests and the acceptance suite.

struct ShortcutModels {
  ShortcutDataset data;
  Model nobn;  // also the frozen teacher
  Model wbn;
  std::vector<double> lambdas;
  std::vector<Model> ct;                 // parallel to lambdas
  std::vector<double> validation_none;   // CT None error on the validation split
  std::size_t selected = 0;              // index into lambdas
  TrainTrace nobn_trace, wbn_trace;
  std::vector<TrainTrace> ct_traces;
  std::vector<std::pair<std::size_t, Model>> nobn_snapshots, wbn_snapshots;  // (epoch, weights)
};

/// Seeds for replicate r: data, teacher and student streams all derive from
/// (cfg.seed, r).
std::uint64_t replicate_seed(const ExperimentConfig& cfg, std::size_t replicate);

/// Trains NoBN (the frozen teacher), wBN and one CT student per lambda.
/// With `snapshot_every` > 0, copies of NoBN and wBN are kept every that many
/// epochs and at the last epoch.
ShortcutModels train_shortcut_models(const ExperimentConfig& cfg, std::size_t replicate,
                                     bool train_ct = true, std::size_t snapshot_every = 0);

}  // namespace normlab
