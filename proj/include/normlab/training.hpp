#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "normlab/data.hpp"
#include "normlab/model.hpp"

namespace normlab {

enum class OptimizerKind { SGD, Adam };
enum class ScheduleKind { Constant, Cosine, Step };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::SGD;
  double lr = 0.01;
  double momentum = 0.0;  // SGD
  bool nesterov = false;  // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Constant;
  double lr_end = 1e-5;                 // Cosine
  double factor = 0.1;                  // Step
  std::vector<std::size_t> at_epochs;  // Step: multiply by factor at each listed epoch
};

struct TrainConfig {
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  double l2_coefficient = 0.0;  // on Conv/Dense weights
  std::uint64_t seed = 0;
};

struct CTConfig {
  TrainConfig teacher;
  TrainConfig student;
  double lambda = 1.0;
};

void validate(const TrainConfig& cfg);

/// Learning rate for `epoch` in [0, cfg.epochs); the start value is cfg.optimizer.lr.
double lr_at(const TrainConfig& cfg, std::size_t epoch);

/// First-order optimizer over a fixed list of parameter tensors. Gradients are
/// read from each tensor's grad buffer.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, std::vector<Tensor> params);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l_cls = 0.0;
  double l_ct = 0.0;
  double lr = 0.0;
  std::vector<double> split_errors;  // parallel to TrainTrace::split_names
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> split_names;
  std::vector<double> step_loss;  // total loss of every optimizer step, in order

  std::string to_csv() const;
};

/// Optional per-epoch evaluation of named splits (error in %).
struct TrainHooks {
  std::vector<std::pair<std::string, const Dataset*>> eval_sets;
  std::function<void(std::size_t epoch, const Model& model)> on_epoch_end;
};

struct TrainResult {
  Model model;
  TrainTrace trace;
};

/// Single model trained on mean cross-entropy. Init and shuffle streams are
/// derived from cfg.seed.
TrainResult train_baseline(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                           const TrainHooks& hooks = {});

/// Baseline training for a BN-free spec; the returned model is frozen.
TrainResult train_teacher(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                          const TrainHooks& hooks = {});

/// Student trained on L_cls + lambda * mse(f_S, f_T) with f_T from the frozen
/// teacher on the same minibatch. The teacher state hash is verified after
/// every epoch.
TrainResult train_student_ct(const ModelSpec& spec, Model& teacher, const Dataset& data,
                             const CTConfig& cfg, const TrainHooks& hooks = {});

}  // namespace normlab
